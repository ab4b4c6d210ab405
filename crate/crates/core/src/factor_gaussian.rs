//! The factor-covariance Gaussian variational family q(theta) = N(mu, BB' + D^2).
//!
//! B is d x f and lower triangular (B[i][j] = 0 for j > i), D = diag(c). The
//! flattened variational parameter is lambda = (mu, vec(B) restricted to the
//! lower triangle, c), packed column-major. All solves against Sigma go
//! through the Woodbury identity, so no d x d matrix is ever formed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Idiosyncratic scales below this magnitude are treated as singular.
pub const MIN_SCALE: f64 = 1e-8;

const LN_2PI: f64 = 1.8378770664093453;

/// Source of the standard-normal noise (eps1, eps2) used by the
/// reparametrization estimator. Seeded RNGs implement it; tests can inject
/// degenerate noise.
pub trait NoiseSource {
    fn draw(&mut self, f: usize, d: usize) -> (Array1<f64>, Array1<f64>);
}

impl<R: Rng> NoiseSource for R {
    fn draw(&mut self, f: usize, d: usize) -> (Array1<f64>, Array1<f64>) {
        let eps1 = Array1::from_iter((0..f).map(|_| self.sample::<f64, _>(StandardNormal)));
        let eps2 = Array1::from_iter((0..d).map(|_| self.sample::<f64, _>(StandardNormal)));
        (eps1, eps2)
    }
}

/// Emits eps = 0, so every draw collapses to theta = mu.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, f: usize, d: usize) -> (Array1<f64>, Array1<f64>) {
        (Array1::zeros(f), Array1::zeros(d))
    }
}

#[derive(Debug, Clone)]
pub struct FactorGaussian {
    pub mu: Array1<f64>,
    /// d x f loading matrix, lower triangular in the tall sense.
    pub b: Array2<f64>,
    /// Idiosyncratic standard deviations (diagonal of D), sign-unconstrained.
    pub c: Array1<f64>,
}

impl FactorGaussian {
    pub fn new(mu: Array1<f64>, b: Array2<f64>, c: Array1<f64>) -> Result<Self> {
        let d = mu.len();
        if b.nrows() != d {
            return Err(Error::Dimension { what: "B rows", expected: d, got: b.nrows() });
        }
        if c.len() != d {
            return Err(Error::Dimension { what: "c length", expected: d, got: c.len() });
        }
        if b.ncols() > d {
            return Err(Error::Dimension { what: "factor count", expected: d, got: b.ncols() });
        }
        let fg = FactorGaussian { mu, b, c };
        if !fg.is_lower_triangular() {
            return Err(Error::Config("B has nonzero entries above the diagonal".into()));
        }
        Ok(fg)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn factors(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_lower_triangular(&self) -> bool {
        let (d, f) = self.b.dim();
        (0..d).all(|i| (i + 1..f).all(|j| self.b[(i, j)] == 0.0))
    }

    /// Number of free entries in the lower triangle of a d x f loading matrix.
    pub fn lower_len(d: usize, f: usize) -> usize {
        d * f - f * (f - 1) / 2
    }

    /// Length of the packed lambda vector.
    pub fn packed_len(d: usize, f: usize) -> usize {
        2 * d + Self::lower_len(d, f)
    }

    /// Flattens (mu, lower(B), c) into one vector, columns of B stacked left
    /// to right with the fixed upper-triangle zeros omitted.
    pub fn pack(&self) -> Array1<f64> {
        pack_parts(&self.mu, &self.b.view(), &self.c)
    }

    pub fn from_packed(lambda: &Array1<f64>, d: usize, f: usize) -> Result<Self> {
        let expected = Self::packed_len(d, f);
        if lambda.len() != expected {
            return Err(Error::Dimension { what: "lambda length", expected, got: lambda.len() });
        }
        let (mu, b, c) = unpack_parts(lambda, d, f);
        FactorGaussian::new(mu, b, c)
    }

    fn check_scales(&self) -> Result<()> {
        for (i, &v) in self.c.iter().enumerate() {
            if v.abs() < MIN_SCALE {
                return Err(Error::SingularScale { index: i, value: v });
            }
        }
        Ok(())
    }

    /// theta = mu + B eps1 + c o eps2.
    pub fn sample_theta(&self, eps1: &Array1<f64>, eps2: &Array1<f64>) -> Result<Array1<f64>> {
        if eps1.len() != self.factors() {
            return Err(Error::Dimension {
                what: "eps1 length",
                expected: self.factors(),
                got: eps1.len(),
            });
        }
        if eps2.len() != self.dim() {
            return Err(Error::Dimension {
                what: "eps2 length",
                expected: self.dim(),
                got: eps2.len(),
            });
        }
        Ok(&self.mu + &self.b.dot(eps1) + &(&self.c * eps2))
    }

    /// Woodbury solver for Sigma = BB' + D^2, reusable across several
    /// right-hand sides. Factoring costs O(d f^2 + f^3).
    pub fn woodbury(&self) -> Result<Woodbury> {
        self.check_scales()?;
        let f = self.factors();
        let dinv2 = self.c.mapv(|v| 1.0 / (v * v));
        // D^{-2} B, rows of B scaled by 1/c_i^2
        let d2b = &self.b * &dinv2.view().insert_axis(Axis(1));
        // A = I_f + B' D^{-2} B
        let mut a = self.b.t().dot(&d2b);
        for j in 0..f {
            a[(j, j)] += 1.0;
        }
        let chol = linalg::cholesky(&a)
            .map_err(|e| Error::Numerical(format!("Woodbury f x f solve failed: {e}")))?;
        Ok(Woodbury { dinv2, d2b, chol })
    }

    /// Sigma^{-1} X for a d x k right-hand side.
    pub fn sigma_inv_mult(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::Dimension { what: "rhs rows", expected: self.dim(), got: x.nrows() });
        }
        Ok(self.woodbury()?.solve_mat(x))
    }

    /// Sigma^{-1} x for a single vector.
    pub fn sigma_inv_vec(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { what: "rhs length", expected: self.dim(), got: x.len() });
        }
        Ok(self.woodbury()?.solve_vec(x))
    }

    /// Gradient of log q at theta: -Sigma^{-1}(theta - mu).
    pub fn grad_log_q(&self, theta: &Array1<f64>) -> Result<Array1<f64>> {
        let diff = theta - &self.mu;
        Ok(-self.sigma_inv_vec(&diff)?)
    }

    /// Diagonal of Sigma: Sigma_ii = sum_j B_ij^2 + c_i^2.
    pub fn sigma_diag(&self) -> Array1<f64> {
        let mut out = self.c.mapv(|v| v * v);
        for (i, row) in self.b.rows().into_iter().enumerate() {
            out[i] += row.iter().map(|v| v * v).sum::<f64>();
        }
        out
    }

    /// log |Sigma| via the matrix determinant lemma:
    /// 2 sum log|c_i| + log|I_f + B' D^{-2} B|.
    pub fn log_det_sigma(&self) -> Result<f64> {
        let w = self.woodbury()?;
        let core = linalg::cholesky_log_det(&w.chol);
        Ok(2.0 * self.c.iter().map(|v| v.abs().ln()).sum::<f64>() + core)
    }

    /// log q(theta).
    pub fn log_density(&self, theta: &Array1<f64>) -> Result<f64> {
        let w = self.woodbury()?;
        let diff = theta - &self.mu;
        let quad = diff.dot(&w.solve_vec(&diff));
        let log_det = 2.0 * self.c.iter().map(|v| v.abs().ln()).sum::<f64>()
            + linalg::cholesky_log_det(&w.chol);
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + log_det + quad))
    }
}

/// Cached Woodbury factorization of Sigma = BB' + D^2.
pub struct Woodbury {
    dinv2: Array1<f64>,
    d2b: Array2<f64>,
    chol: Array2<f64>,
}

impl Woodbury {
    pub fn solve_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let u = x * &self.dinv2;
        let t = self.d2b.t().dot(x);
        let s = linalg::cholesky_solve(&self.chol, &t);
        u - self.d2b.dot(&s)
    }

    pub fn solve_mat(&self, x: &Array2<f64>) -> Array2<f64> {
        let u = x * &self.dinv2.view().insert_axis(Axis(1));
        let t = self.d2b.t().dot(x);
        let mut out = u;
        for (mut col, tcol) in out.columns_mut().into_iter().zip(t.columns()) {
            let s = linalg::cholesky_solve(&self.chol, &tcol.to_owned());
            col.scaled_add(-1.0, &self.d2b.dot(&s).view());
        }
        out
    }
}

/// Lower-bound gradient estimate with the estimate of the bound itself.
#[derive(Debug, Clone)]
pub struct LBGradientEstimate {
    pub grad_mu: Array1<f64>,
    /// d x f with the upper triangle exactly zero.
    pub grad_b: Array2<f64>,
    pub grad_c: Array1<f64>,
    /// Average of h(theta_s) - log q(theta_s) over the draws.
    pub lb_value: f64,
}

impl LBGradientEstimate {
    pub fn flatten(&self) -> Array1<f64> {
        pack_parts(&self.grad_mu, &self.grad_b.view(), &self.grad_c)
    }
}

pub fn pack_parts(mu: &Array1<f64>, b: &ArrayView2<f64>, c: &Array1<f64>) -> Array1<f64> {
    let (d, f) = b.dim();
    let mut out = Array1::<f64>::zeros(FactorGaussian::packed_len(d, f));
    let mut k = 0;
    for &v in mu.iter() {
        out[k] = v;
        k += 1;
    }
    for j in 0..f {
        for i in j..d {
            out[k] = b[(i, j)];
            k += 1;
        }
    }
    for &v in c.iter() {
        out[k] = v;
        k += 1;
    }
    out
}

pub fn unpack_parts(v: &Array1<f64>, d: usize, f: usize) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let mut mu = Array1::<f64>::zeros(d);
    let mut b = Array2::<f64>::zeros((d, f));
    let mut c = Array1::<f64>::zeros(d);
    let mut k = 0;
    for i in 0..d {
        mu[i] = v[k];
        k += 1;
    }
    for j in 0..f {
        for i in j..d {
            b[(i, j)] = v[k];
            k += 1;
        }
    }
    for i in 0..d {
        c[i] = v[k];
        k += 1;
    }
    (mu, b, c)
}

/// Reparametrization-trick estimate of the lower-bound gradient.
///
/// The callback returns (h(theta), grad h(theta)) in one call so expensive
/// forward passes are shared. For each draw, the score correction
/// Sigma^{-1}(B eps1 + c o eps2) pairs with grad h; the same draws feed the
/// reported lower-bound estimate. When the family contains the target
/// (h = log q + const), every per-draw term vanishes identically.
pub fn estimate_lb_gradient<F, N>(
    fg: &FactorGaussian,
    h_and_grad: &mut F,
    samples: usize,
    noise: &mut N,
) -> Result<LBGradientEstimate>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
    N: NoiseSource + ?Sized,
{
    if samples == 0 {
        return Err(Error::Config("gradient sample count must be >= 1".into()));
    }
    let d = fg.dim();
    let f = fg.factors();
    let wood = fg.woodbury()?;
    let log_det = 2.0 * fg.c.iter().map(|v| v.abs().ln()).sum::<f64>()
        + linalg::cholesky_log_det(&wood.chol);

    let mut grad_mu = Array1::<f64>::zeros(d);
    let mut grad_b = Array2::<f64>::zeros((d, f));
    let mut grad_c = Array1::<f64>::zeros(d);
    let mut lb = 0.0;

    for s in 0..samples {
        let (eps1, eps2) = noise.draw(f, d);
        let dev = fg.b.dot(&eps1) + &(&fg.c * &eps2);
        let theta = &fg.mu + &dev;
        let (h, gh) = h_and_grad(&theta)?;
        if !h.is_finite() {
            return Err(Error::NonFinite { what: "h(theta)", index: s });
        }
        if let Some(bad) = gh.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "grad h(theta)", index: bad });
        }
        let corr = wood.solve_vec(&dev);
        let v = &gh + &corr;
        grad_mu += &v;
        for j in 0..f {
            let e = eps1[j];
            for i in j..d {
                grad_b[(i, j)] += v[i] * e;
            }
        }
        grad_c += &(&v * &eps2);
        let log_q = -0.5 * (d as f64 * LN_2PI + log_det + dev.dot(&corr));
        lb += h - log_q;
    }

    let scale = 1.0 / samples as f64;
    Ok(LBGradientEstimate {
        grad_mu: grad_mu * scale,
        grad_b: grad_b * scale,
        grad_c: grad_c * scale,
        lb_value: lb * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(d: usize, f: usize, seed: u64) -> FactorGaussian {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let mut b = Array2::<f64>::zeros((d, f));
        for j in 0..f {
            for i in j..d {
                b[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let c = Array1::from_iter(
            (0..d).map(|_| 0.3 + rng.sample::<f64, _>(StandardNormal).abs()),
        );
        FactorGaussian::new(mu, b, c).unwrap()
    }

    fn dense_sigma(fg: &FactorGaussian) -> Array2<f64> {
        let mut s = fg.b.dot(&fg.b.t());
        for i in 0..fg.dim() {
            s[(i, i)] += fg.c[i] * fg.c[i];
        }
        s
    }

    #[test]
    fn sample_theta_identity_case() {
        let d = 4;
        let fg = FactorGaussian::new(
            Array1::zeros(d),
            Array2::zeros((d, 1)),
            Array1::ones(d),
        )
        .unwrap();
        let e = array![0.3, -1.0, 2.0, 0.0];
        let theta = fg.sample_theta(&array![0.0], &e).unwrap();
        assert_eq!(theta, e);
    }

    #[test]
    fn sample_theta_direct_substitution() {
        let fg = FactorGaussian::new(
            array![1.0, 1.0],
            array![[1.0], [2.0]],
            array![0.5, 0.5],
        )
        .unwrap();
        let theta = fg.sample_theta(&array![2.0], &array![0.0, 2.0]).unwrap();
        assert_eq!(theta, array![3.0, 6.0]);
    }

    #[test]
    fn sample_theta_dimension_error() {
        let fg = random_instance(3, 1, 0);
        assert!(fg.sample_theta(&array![1.0, 2.0], &Array1::zeros(3)).is_err());
    }

    #[test]
    fn sample_covariance_matches_sigma() {
        // Monte Carlo oracle: empirical covariance of many draws vs BB' + D^2.
        let fg = random_instance(3, 2, 42);
        let sigma = dense_sigma(&fg);
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = fg.dim();
        let mut sum = Array1::<f64>::zeros(d);
        let mut sum_sq = Array2::<f64>::zeros((d, d));
        for _ in 0..n {
            let (e1, e2) = rng.draw(fg.factors(), d);
            let t = fg.sample_theta(&e1, &e2).unwrap();
            sum += &t;
            for i in 0..d {
                for j in 0..d {
                    sum_sq[(i, j)] += t[i] * t[j];
                }
            }
        }
        let mean = sum / n as f64;
        for i in 0..d {
            for j in 0..d {
                let cov = sum_sq[(i, j)] / n as f64 - mean[i] * mean[j];
                let rel = (cov - sigma[(i, j)]).abs() / sigma.diag().iter().cloned().fold(0.0, f64::max);
                assert!(rel < 0.01, "cov[{i},{j}] = {cov} vs {}", sigma[(i, j)]);
            }
        }
    }

    #[test]
    fn sigma_inv_mult_diagonal_case() {
        let d = 3;
        let fg = FactorGaussian::new(
            Array1::zeros(d),
            Array2::zeros((d, 1)),
            Array1::from_elem(d, 2.0),
        )
        .unwrap();
        let eye = Array2::eye(d);
        let inv = fg.sigma_inv_mult(&eye).unwrap();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 0.25 } else { 0.0 };
                assert_relative_eq!(inv[(i, j)], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn sigma_inv_mult_is_two_sided_inverse() {
        for seed in 0..5 {
            let fg = random_instance(8, 3, seed);
            let sigma = dense_sigma(&fg);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Array2::from_shape_fn((8, 4), |_| rng.sample::<f64, _>(StandardNormal));
            let y = fg.sigma_inv_mult(&x).unwrap();
            let back = sigma.dot(&y);
            let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (a, b) in back.iter().zip(x.iter()) {
                assert!((a - b).abs() / scale < 1e-10);
            }
        }
    }

    #[test]
    fn sigma_inv_mult_matches_dense_lu() {
        let fg = random_instance(8, 3, 9);
        let sigma = dense_sigma(&fg);
        let lu = linalg::Lu::factor(&sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array1::from_iter((0..8).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let fast = fg.sigma_inv_vec(&x).unwrap();
        let dense = lu.solve(&x);
        for (a, b) in fast.iter().zip(dense.iter()) {
            assert!((a - b).abs() / dense.iter().map(|v| v.abs()).fold(1e-300, f64::max) < 1e-10);
        }
    }

    #[test]
    fn sigma_inv_rejects_zero_scale() {
        let fg = FactorGaussian {
            mu: Array1::zeros(2),
            b: Array2::zeros((2, 1)),
            c: array![1.0, 0.0],
        };
        match fg.sigma_inv_vec(&array![1.0, 1.0]) {
            Err(Error::SingularScale { index: 1, .. }) => {}
            other => panic!("expected singular-scale error, got {other:?}"),
        }
    }

    #[test]
    fn grad_log_q_zero_at_mode() {
        let fg = random_instance(5, 2, 3);
        let g = fg.grad_log_q(&fg.mu.clone()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn grad_log_q_diagonal_closed_form() {
        let fg = FactorGaussian::new(
            array![1.0, -1.0],
            Array2::zeros((2, 1)),
            array![0.5, 2.0],
        )
        .unwrap();
        let theta = array![2.0, 1.0];
        let g = fg.grad_log_q(&theta).unwrap();
        assert_relative_eq!(g[0], -(2.0 - 1.0) / 0.25, epsilon = 1e-13);
        assert_relative_eq!(g[1], -(1.0 + 1.0) / 4.0, epsilon = 1e-13);
    }

    #[test]
    fn grad_log_q_matches_finite_differences() {
        let fg = random_instance(5, 2, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let theta =
            &fg.mu + &Array1::from_iter((0..5).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let g = fg.grad_log_q(&theta).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (fg.log_density(&tp).unwrap() - fg.log_density(&tm).unwrap()) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() / g[i].abs().max(1e-8) < 1e-5,
                "coord {i}: fd {fd} vs {g}"
            );
        }
    }

    #[test]
    fn sigma_diag_examples() {
        let fg = FactorGaussian::new(
            Array1::zeros(2),
            Array2::zeros((2, 1)),
            array![3.0, 1.0],
        )
        .unwrap();
        assert_eq!(fg.sigma_diag(), array![9.0, 1.0]);

        let fg = FactorGaussian::new(
            Array1::zeros(2),
            array![[1.0], [2.0]],
            array![1.0, 1.0],
        )
        .unwrap();
        assert_eq!(fg.sigma_diag(), array![2.0, 5.0]);
    }

    #[test]
    fn sigma_diag_matches_dense() {
        let fg = random_instance(7, 3, 23);
        let sigma = dense_sigma(&fg);
        let diag = fg.sigma_diag();
        for i in 0..7 {
            assert_relative_eq!(diag[i], sigma[(i, i)], epsilon = 1e-13);
        }
    }

    #[test]
    fn pack_roundtrip_is_bit_exact() {
        for seed in 0..8 {
            let d = 3 + (seed as usize % 5);
            let f = 1 + (seed as usize % 3).min(d - 1);
            let fg = random_instance(d, f, 1000 + seed);
            let packed = fg.pack();
            assert_eq!(packed.len(), FactorGaussian::packed_len(d, f));
            let back = FactorGaussian::from_packed(&packed, d, f).unwrap();
            assert_eq!(back.mu, fg.mu);
            assert_eq!(back.b, fg.b);
            assert_eq!(back.c, fg.c);
        }
    }

    #[test]
    fn log_density_matches_dense_formula() {
        let fg = random_instance(6, 2, 31);
        let sigma = dense_sigma(&fg);
        let lu = linalg::Lu::factor(&sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let theta =
            &fg.mu + &Array1::from_iter((0..6).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let diff = &theta - &fg.mu;
        let quad = diff.dot(&lu.solve(&diff));
        // log det via LU of the dense Sigma
        let chol = linalg::cholesky(&sigma).unwrap();
        let log_det = linalg::cholesky_log_det(&chol);
        let want = -0.5 * (6.0 * LN_2PI + log_det + quad);
        assert_relative_eq!(fg.log_density(&theta).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn estimator_exactly_zero_when_family_contains_target() {
        // h = log q: the per-draw estimate vanishes even for S = 1.
        let fg = random_instance(6, 2, 55);
        let fg2 = fg.clone();
        let mut cb = move |theta: &Array1<f64>| {
            let h = fg2.log_density(theta)?;
            let g = fg2.grad_log_q(theta)?;
            Ok((h, g))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let est = estimate_lb_gradient(&fg, &mut cb, 1, &mut rng).unwrap();
        assert!(est.grad_mu.iter().all(|v| v.abs() < 1e-11), "{:?}", est.grad_mu);
        assert!(est.grad_b.iter().all(|v| v.abs() < 1e-11));
        assert!(est.grad_c.iter().all(|v| v.abs() < 1e-11));
        assert!(est.lb_value.abs() < 1e-11);
    }

    #[test]
    fn estimator_mean_near_zero_at_matching_gaussian() {
        // Standard-normal target with q = N(0, I): expected gradient is zero.
        let d = 3;
        let fg = FactorGaussian::new(
            Array1::zeros(d),
            Array2::zeros((d, 1)),
            Array1::ones(d),
        )
        .unwrap();
        let mut cb = |theta: &Array1<f64>| Ok((-0.5 * theta.dot(theta), -theta.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut sum = Array1::<f64>::zeros(d);
        let mut sum_sq = Array1::<f64>::zeros(d);
        for _ in 0..n {
            let est = estimate_lb_gradient(&fg, &mut cb, 1, &mut rng).unwrap();
            sum += &est.grad_mu;
            sum_sq += &est.grad_mu.mapv(|v| v * v);
        }
        for i in 0..d {
            let mean = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se.max(1e-12), "mean {mean} vs se {se}");
        }
    }

    #[test]
    fn estimator_preserves_zero_upper_triangle() {
        let fg = random_instance(5, 3, 91);
        let mut cb = |theta: &Array1<f64>| Ok((-0.5 * theta.dot(theta), -theta.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let est = estimate_lb_gradient(&fg, &mut cb, 3, &mut rng).unwrap();
        for i in 0..5 {
            for j in i + 1..3 {
                assert_eq!(est.grad_b[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn estimator_reports_nonfinite_h() {
        let fg = random_instance(3, 1, 93);
        let mut cb = |theta: &Array1<f64>| Ok((f64::NAN, theta.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        match estimate_lb_gradient(&fg, &mut cb, 1, &mut rng) {
            Err(Error::NonFinite { what: "h(theta)", .. }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    // Analytic lower bound for a Gaussian target N(m0, S0):
    // LB = E_q[log N(theta; m0, S0)] + entropy(q).
    fn analytic_gaussian_lb(
        fg: &FactorGaussian,
        m0: &Array1<f64>,
        s0_inv: &Array2<f64>,
        s0_log_det: f64,
    ) -> f64 {
        let d = fg.dim() as f64;
        let sigma = dense_sigma(fg);
        let diff = &fg.mu - m0;
        let quad = diff.dot(&s0_inv.dot(&diff));
        let trace = s0_inv.dot(&sigma).diag().sum();
        let chol = linalg::cholesky(&sigma).unwrap();
        let entropy = 0.5 * (d * (LN_2PI + 1.0) + linalg::cholesky_log_det(&chol));
        -0.5 * (d * LN_2PI + s0_log_det + quad + trace) + entropy
    }

    #[test]
    fn estimator_matches_analytic_lb_gradient() {
        // d = 3, f = 1 Gaussian target; S-averaged estimator vs central finite
        // differences of the analytic lower bound in lambda.
        let d = 3;
        let m0 = array![0.4, -0.2, 0.1];
        let s0 = array![[1.0, 0.3, 0.0], [0.3, 1.2, 0.2], [0.0, 0.2, 0.8]];
        let s0_chol = linalg::cholesky(&s0).unwrap();
        let s0_log_det = linalg::cholesky_log_det(&s0_chol);
        let s0_inv = linalg::cholesky_inverse(&s0_chol);

        let fg = FactorGaussian::new(
            array![0.3, -0.1, 0.0],
            array![[0.4], [0.2], [-0.3]],
            array![0.9, 1.1, 0.7],
        )
        .unwrap();

        let s0_inv_cb = s0_inv.clone();
        let m0_cb = m0.clone();
        let mut cb = move |theta: &Array1<f64>| {
            let diff = theta - &m0_cb;
            let si = s0_inv_cb.dot(&diff);
            Ok((-0.5 * (3.0 * LN_2PI + s0_log_det + diff.dot(&si)), -si))
        };

        let samples = 10_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let est = estimate_lb_gradient(&fg, &mut cb, samples, &mut rng).unwrap();
        let est_flat = est.flatten();

        let lambda = fg.pack();
        let h = 1e-5;
        let mut fd = Array1::<f64>::zeros(lambda.len());
        for k in 0..lambda.len() {
            let mut lp = lambda.clone();
            let mut lm = lambda.clone();
            lp[k] += h;
            lm[k] -= h;
            let fp = FactorGaussian::from_packed(&lp, d, 1).unwrap();
            let fm = FactorGaussian::from_packed(&lm, d, 1).unwrap();
            fd[k] = (analytic_gaussian_lb(&fp, &m0, &s0_inv, s0_log_det)
                - analytic_gaussian_lb(&fm, &m0, &s0_inv, s0_log_det))
                / (2.0 * h);
        }
        let rel = (&est_flat - &fd).mapv(|v| v * v).sum().sqrt()
            / fd.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn estimator_error_shrinks_at_monte_carlo_rate() {
        // Unbiasedness: empirical mean over n draws approaches the analytic
        // gradient at roughly the 1/sqrt(n) rate.
        let d = 3;
        let m0 = array![0.5, 0.0, -0.5];
        let s0_inv: Array2<f64> = Array2::eye(3) * 0.8;
        let fg = FactorGaussian::new(
            array![0.2, 0.1, 0.0],
            array![[0.3], [0.1], [0.2]],
            array![0.8, 1.0, 1.2],
        )
        .unwrap();
        let s0_chol = linalg::cholesky(&(Array2::eye(3) * (1.0 / 0.8))).unwrap();
        let s0_log_det = linalg::cholesky_log_det(&s0_chol);
        let truth = {
            // finite differences of the analytic LB, accurate enough as truth
            let lambda = fg.pack();
            let h = 1e-6;
            let mut g = Array1::<f64>::zeros(lambda.len());
            for k in 0..lambda.len() {
                let mut lp = lambda.clone();
                let mut lm = lambda.clone();
                lp[k] += h;
                lm[k] -= h;
                let fp = FactorGaussian::from_packed(&lp, d, 1).unwrap();
                let fm = FactorGaussian::from_packed(&lm, d, 1).unwrap();
                g[k] = (analytic_gaussian_lb(&fp, &m0, &s0_inv, s0_log_det)
                    - analytic_gaussian_lb(&fm, &m0, &s0_inv, s0_log_det))
                    / (2.0 * h);
            }
            g
        };
        let m0_cb = m0.clone();
        let s0_inv_cb = s0_inv.clone();
        let mut cb = move |theta: &Array1<f64>| {
            let diff = theta - &m0_cb;
            let si = s0_inv_cb.dot(&diff);
            Ok((-0.5 * (3.0 * LN_2PI + s0_log_det + diff.dot(&si)), -si))
        };
        let mut errs = Vec::new();
        for (i, n) in [100usize, 10_000].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + i as u64);
            let est = estimate_lb_gradient(&fg, &mut cb, n, &mut rng).unwrap();
            let err = (&est.flatten() - &truth).mapv(|v| v * v).sum().sqrt();
            errs.push(err);
        }
        // 100x more samples should shrink the error by about 10x.
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.0 && ratio < 35.0, "ratio {ratio}, errs {errs:?}");
    }

    #[test]
    fn zero_noise_draws_collapse_to_mode() {
        let fg = random_instance(4, 2, 61);
        let mut cb = |theta: &Array1<f64>| Ok((1.0, Array1::zeros(theta.len())));
        let est = estimate_lb_gradient(&fg, &mut cb, 1, &mut ZeroNoise).unwrap();
        assert!(est.grad_mu.iter().all(|v| *v == 0.0));
        assert!(est.grad_b.iter().all(|v| *v == 0.0));
        assert!(est.grad_c.iter().all(|v| *v == 0.0));
    }
}

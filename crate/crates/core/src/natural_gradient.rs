//! Natural-gradient preconditioning for the factor-Gaussian family.
//!
//! The Fisher information of q = N(mu, BB' + D^2) is block structured over
//! lambda = (mu, lower(B), c) with zero off-diagonal mu blocks. The one-factor
//! case has a closed-form inverse costing O(d); for f > 1 the (approximated)
//! Fisher-vector product is matrix-free and a conjugate-gradient solve
//! produces the natural gradient. A dense assembly of the same blocks serves
//! as a test oracle for small dimensions.
//!
//! Multi-factor approximation: the B-c cross block is dropped and the c block
//! is replaced by the diagonal 2 (D Sigma~^{-1}) o (Sigma~^{-1} D) with
//! Sigma~ = diag(Sigma). The one-factor path keeps the exact c block
//! 2 (diag(v1) + v2 v2'), which the rank-1 structure makes cheap.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::factor_gaussian::FactorGaussian;
use crate::linalg;

/// Settings for the conjugate-gradient natural-gradient solve.
#[derive(Debug, Clone)]
pub struct CGConfig {
    /// Relative residual tolerance |I_F x - g| / |g|.
    pub tol: f64,
    pub max_iter: usize,
    /// Uniform diagonal jitter. `None` resolves to 1e-6 times the mean
    /// diagonal of the c block, which keeps the operator comfortably positive
    /// definite without distorting well-scaled problems.
    pub jitter: Option<f64>,
}

impl Default for CGConfig {
    fn default() -> Self {
        // The LB gradient is itself a Monte Carlo estimate, so solving much
        // past its noise floor wastes iterations.
        CGConfig { tol: 1e-4, max_iter: 200, jitter: None }
    }
}

impl CGConfig {
    pub fn resolved_jitter(&self, fg: &FactorGaussian) -> f64 {
        match self.jitter {
            Some(j) => j,
            None => {
                let diag = c_block_diag_approx(fg);
                1e-6 * diag.mean().unwrap_or(0.0)
            }
        }
    }
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Array1<f64>,
    /// False when the iteration cap was reached first; `x` is then the best
    /// iterate seen.
    pub converged: bool,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Quantities shared by the rank-1 (f = 1) natural-gradient formulas:
/// Sigma^{-1} = D^{-2} - h h' with h = B o c^{-2} / sqrt(1 + kappa1), and the
/// exact c block of the Fisher is 2 (diag(v1) + v2 v2').
#[derive(Debug, Clone)]
pub struct Rank1Workspace {
    pub kappa1: f64,
    pub kappa2: f64,
    pub h_vec: Array1<f64>,
    pub v1: Array1<f64>,
    pub v2: Array1<f64>,
}

impl Rank1Workspace {
    pub fn new(fg: &FactorGaussian) -> Result<Rank1Workspace> {
        if fg.factors() != 1 {
            return Err(Error::Dimension { what: "factors", expected: 1, got: fg.factors() });
        }
        for (i, &v) in fg.c.iter().enumerate() {
            if v.abs() < crate::factor_gaussian::MIN_SCALE {
                return Err(Error::SingularScale { index: i, value: v });
            }
        }
        let b = fg.b.column(0);
        let kappa1: f64 = b.iter().zip(fg.c.iter()).map(|(bi, ci)| (bi / ci).powi(2)).sum();
        let scale = 1.0 / (1.0 + kappa1).sqrt();
        let h_vec = Array1::from_iter(
            b.iter().zip(fg.c.iter()).map(|(bi, ci)| scale * bi / (ci * ci)),
        );
        // diag of Sigma^{-1} is c^{-2} - h^2; the c block of the Fisher is the
        // scaled Hadamard square 2 D (Sigma^{-1} o Sigma^{-1}) D, which
        // expands to 2 (diag(c^{-2} - 2 h^2) + (c o h^2)(c o h^2)').
        let v1 = Array1::from_iter(
            fg.c.iter().zip(h_vec.iter()).map(|(ci, hi)| 1.0 / (ci * ci) - 2.0 * hi * hi),
        );
        let v2 = Array1::from_iter(
            fg.c.iter().zip(h_vec.iter()).map(|(ci, hi)| ci * hi * hi),
        );
        let mut denom = 1.0;
        for i in 0..v1.len() {
            if v1[i] == 0.0 {
                return Err(Error::Numerical(format!(
                    "singular c block in rank-1 natural gradient (v1[{i}] = 0)"
                )));
            }
            denom += v2[i] * v2[i] / v1[i];
        }
        if denom == 0.0 {
            return Err(Error::Numerical("singular c block correction".into()));
        }
        let kappa2 = 0.5 / denom;
        Ok(Rank1Workspace { kappa1, kappa2, h_vec, v1, v2 })
    }
}

/// Packed coordinates (row, col) of the free lower-triangle entries of a
/// d x f loading matrix, columns stacked left to right.
pub fn lower_indices(d: usize, f: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::with_capacity(FactorGaussian::lower_len(d, f));
    for j in 0..f {
        for i in j..d {
            idx.push((i, j));
        }
    }
    idx
}

fn split_lambda(
    fg: &FactorGaussian,
    x: &Array1<f64>,
) -> Result<(Array1<f64>, Array2<f64>, Array1<f64>)> {
    let d = fg.dim();
    let f = fg.factors();
    let n = FactorGaussian::packed_len(d, f);
    if x.len() != n {
        return Err(Error::Dimension { what: "flattened lambda vector", expected: n, got: x.len() });
    }
    let nb = FactorGaussian::lower_len(d, f);
    let x_mu = x.slice(ndarray::s![0..d]).to_owned();
    let mut x_b = Array2::<f64>::zeros((d, f));
    for (k, (i, j)) in lower_indices(d, f).into_iter().enumerate() {
        x_b[(i, j)] = x[d + k];
    }
    let x_c = x.slice(ndarray::s![d + nb..]).to_owned();
    Ok((x_mu, x_b, x_c))
}

fn join_lambda(x_mu: &Array1<f64>, x_b: &Array2<f64>, x_c: &Array1<f64>) -> Array1<f64> {
    crate::factor_gaussian::pack_parts(x_mu, &x_b.view(), x_c)
}

/// Diagonal of the multi-factor c-block approximation 2 c^2 / diag(Sigma)^2.
fn c_block_diag_approx(fg: &FactorGaussian) -> Array1<f64> {
    let sd = fg.sigma_diag();
    Array1::from_iter(fg.c.iter().zip(sd.iter()).map(|(ci, si)| 2.0 * ci * ci / (si * si)))
}

/// Applies the (approximated) Fisher information to a flattened vector,
/// plus `jitter` times the identity. Only Woodbury products are used; memory
/// stays O(d f).
pub fn fisher_vec_product(
    fg: &FactorGaussian,
    x: &Array1<f64>,
    jitter: f64,
) -> Result<Array1<f64>> {
    let (x_mu, x_b, x_c) = split_lambda(fg, x)?;
    let wood = fg.woodbury()?;

    let out_mu = wood.solve_vec(&x_mu);

    // I22 restricted to the lower triangle: 2 Sigma^{-1} X_B (B' Sigma^{-1} B)
    // with the upper triangle zeroed after the product.
    let sib = wood.solve_mat(&fg.b);
    let m = fg.b.t().dot(&sib);
    let mut out_b = wood.solve_mat(&x_b.dot(&m));
    out_b.mapv_inplace(|v| 2.0 * v);
    let (d, f) = out_b.dim();
    for i in 0..d {
        for j in i + 1..f {
            out_b[(i, j)] = 0.0;
        }
    }

    let out_c = if fg.factors() == 1 {
        let ws = Rank1Workspace::new(fg)?;
        let dot = ws.v2.dot(&x_c);
        Array1::from_iter(
            ws.v1
                .iter()
                .zip(ws.v2.iter())
                .zip(x_c.iter())
                .map(|((v1, v2), xc)| 2.0 * (v1 * xc + v2 * dot)),
        )
    } else {
        &c_block_diag_approx(fg) * &x_c
    };

    let mut out = join_lambda(&out_mu, &out_b, &out_c);
    if jitter != 0.0 {
        out.scaled_add(jitter, x);
    }
    Ok(out)
}

/// Conjugate gradients on a symmetric positive definite operator.
fn cg_solve<A>(
    apply: A,
    b: &Array1<f64>,
    x0: Option<&Array1<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution>
where
    A: Fn(&Array1<f64>) -> Result<Array1<f64>>,
{
    let b_norm = b.dot(b).sqrt();
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: Array1::zeros(b.len()),
            converged: true,
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut x = match x0 {
        Some(w) => w.clone(),
        None => Array1::zeros(b.len()),
    };
    let mut r = b - &apply(&x)?;
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut best = (x.clone(), rs.sqrt() / b_norm);
    for iter in 0..max_iter {
        if rs.sqrt() <= tol * b_norm {
            return Ok(CgSolution {
                x,
                converged: true,
                iterations: iter,
                rel_residual: rs.sqrt() / b_norm,
            });
        }
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(Error::Numerical(format!(
                "conjugate gradient hit non-positive curvature (p'Ap = {pap:e}); \
                 increase the jitter"
            )));
        }
        let alpha = rs / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_new = r.dot(&r);
        let rel = rs_new.sqrt() / b_norm;
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        p = &r + &(p * (rs_new / rs));
        rs = rs_new;
    }
    let rel = rs.sqrt() / b_norm;
    if rel <= tol {
        Ok(CgSolution { x, converged: true, iterations: max_iter, rel_residual: rel })
    } else {
        let (x, rel_residual) = best;
        Ok(CgSolution { x, converged: false, iterations: max_iter, rel_residual })
    }
}

/// Natural gradient by a matrix-free conjugate-gradient solve of
/// I_F(lambda) x = g. `warm_start` is typically the previous iteration's
/// natural gradient.
pub fn natgrad_cg(
    fg: &FactorGaussian,
    g: &Array1<f64>,
    cfg: &CGConfig,
    warm_start: Option<&Array1<f64>>,
) -> Result<CgSolution> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite gradient passed to natgrad_cg".into()));
    }
    let jitter = cfg.resolved_jitter(fg);
    cg_solve(|v| fisher_vec_product(fg, v, jitter), g, warm_start, cfg.tol, cfg.max_iter)
}

/// Closed-form natural gradient for the one-factor family; O(d) time and
/// memory. `g` is packed as (g1, g2, g3) = (mu, B, c) blocks of length d each.
pub fn natgrad_rank1(fg: &FactorGaussian, g: &Array1<f64>) -> Result<Array1<f64>> {
    if fg.factors() != 1 {
        return Err(Error::Dimension { what: "factors", expected: 1, got: fg.factors() });
    }
    let d = fg.dim();
    if g.len() != 3 * d {
        return Err(Error::Dimension { what: "gradient length", expected: 3 * d, got: g.len() });
    }
    let ws = Rank1Workspace::new(fg)?;
    if ws.kappa1 == 0.0 {
        return Err(Error::Numerical(
            "degenerate factor loading (kappa1 = 0): B is zero, re-initialize".into(),
        ));
    }
    let b = fg.b.column(0);
    let g1 = g.slice(ndarray::s![0..d]);
    let g2 = g.slice(ndarray::s![d..2 * d]);
    let g3 = g.slice(ndarray::s![2 * d..]);

    let mut out = Array1::<f64>::zeros(3 * d);
    // mu block: Sigma g1
    let g1b = g1.dot(&b);
    for i in 0..d {
        out[i] = g1b * b[i] + fg.c[i] * fg.c[i] * g1[i];
    }
    // B block: ((1 + kappa1) / (2 kappa1)) Sigma g2
    let coef = (1.0 + ws.kappa1) / (2.0 * ws.kappa1);
    let g2b = g2.dot(&b);
    for i in 0..d {
        out[d + i] = coef * (g2b * b[i] + fg.c[i] * fg.c[i] * g2[i]);
    }
    // c block: Sherman-Morrison inverse of 2 (diag(v1) + v2 v2').
    let u = &ws.v2 / &ws.v1;
    let udot = u.dot(&g3);
    for i in 0..d {
        out[2 * d + i] = 0.5 * g3[i] / ws.v1[i] - ws.kappa2 * udot * u[i];
    }
    Ok(out)
}

/// Maximum flattened dimension the dense oracle will materialize.
pub const DENSE_ORACLE_MAX: usize = 3000;

/// Densely assembled Fisher matrix over the flattened lambda, matching
/// `fisher_vec_product` at zero jitter. Intended for tests at small d.
pub fn fisher_dense_oracle(fg: &FactorGaussian) -> Result<Array2<f64>> {
    let d = fg.dim();
    let f = fg.factors();
    let n = FactorGaussian::packed_len(d, f);
    if n > DENSE_ORACLE_MAX {
        return Err(Error::Config(format!(
            "dense Fisher oracle refused: flattened dimension {n} exceeds {DENSE_ORACLE_MAX}"
        )));
    }
    // Dense Sigma^{-1} straight from BB' + D^2, independent of the Woodbury path.
    let mut sigma = fg.b.dot(&fg.b.t());
    for i in 0..d {
        sigma[(i, i)] += fg.c[i] * fg.c[i];
    }
    let sinv_raw = linalg::Lu::factor(&sigma)?.inverse();
    // exact symmetry, so the assembled blocks transpose to themselves bit for bit
    let sinv = (&sinv_raw + &sinv_raw.t()) * 0.5;
    let k_raw = fg.b.t().dot(&sinv).dot(&fg.b);
    let k = (&k_raw + &k_raw.t()) * 0.5;

    let mut m = Array2::<f64>::zeros((n, n));
    m.slice_mut(ndarray::s![0..d, 0..d]).assign(&sinv);

    let idx = lower_indices(d, f);
    for (a, &(i, j)) in idx.iter().enumerate() {
        for (bb, &(kk, l)) in idx.iter().enumerate() {
            m[(d + a, d + bb)] = 2.0 * k[(j, l)] * sinv[(i, kk)];
        }
    }

    let off = d + idx.len();
    if f == 1 {
        let ws = Rank1Workspace::new(fg)?;
        for i in 0..d {
            for j in 0..d {
                let mut v = ws.v2[i] * ws.v2[j];
                if i == j {
                    v += ws.v1[i];
                }
                m[(off + i, off + j)] = 2.0 * v;
            }
        }
    } else {
        let diag = c_block_diag_approx(fg);
        for i in 0..d {
            m[(off + i, off + i)] = diag[i];
        }
    }
    Ok(m)
}

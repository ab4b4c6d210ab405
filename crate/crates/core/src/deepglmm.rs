//! DeepGLMM: panel responses with subject-specific random effects on the
//! output-layer weights, alpha_i ~ N(0, Gamma) with diagonal Gamma.
//!
//! The per-subject likelihood contribution integrates over alpha_i. Gradients
//! use Fisher's identity: the posterior expectation of the complete-data
//! score, estimated by importance sampling from the Laplace approximation of
//! p(alpha_i | y_i, theta). Gamma is log-transformed so the whole parameter
//! vector is unconstrained; the posterior of the transformed vector picks up
//! the Jacobian exp(sum theta_Gamma).

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::deepglm::{
    backprop_eta, dll_deta, forward_batch, log_density_at_eta, log_prior_and_grad,
    obs_weight_eta, Family, NetworkSpec, ParamIndexMap, PriorSpec, ShrinkageState,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::trainer::Objective;

/// One subject's rows, time-ordered.
#[derive(Debug, Clone)]
pub struct Panel {
    pub subject: String,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

/// Grouped observations for mixed models.
#[derive(Debug, Clone)]
pub struct PanelData {
    pub panels: Vec<Panel>,
}

impl PanelData {
    pub fn new(panels: Vec<Panel>) -> Result<PanelData> {
        if panels.is_empty() {
            return Err(Error::Config("panel data has no subjects".into()));
        }
        let p = panels[0].x.ncols();
        for panel in &panels {
            if panel.x.nrows() == 0 {
                return Err(Error::Config(format!("subject {} has no rows", panel.subject)));
            }
            if panel.x.ncols() != p {
                return Err(Error::Dimension {
                    what: "panel covariate columns",
                    expected: p,
                    got: panel.x.ncols(),
                });
            }
            if panel.y.len() != panel.x.nrows() {
                return Err(Error::Dimension {
                    what: "panel rows",
                    expected: panel.x.nrows(),
                    got: panel.y.len(),
                });
            }
        }
        Ok(PanelData { panels })
    }

    pub fn n_subjects(&self) -> usize {
        self.panels.len()
    }

    pub fn n_rows(&self) -> usize {
        self.panels.iter().map(|p| p.x.nrows()).sum()
    }
}

/// Which output-layer coefficients receive a subject-specific perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    /// Intercept and every output weight: dimension m + 1.
    OutputLayer,
    /// Intercept only.
    InterceptOnly,
}

impl RandomEffects {
    pub fn dim(&self, spec: &NetworkSpec) -> usize {
        match self {
            RandomEffects::OutputLayer => spec.last_hidden() + 1,
            RandomEffects::InterceptOnly => 1,
        }
    }
}

/// Laplace approximation of a subject's random-effect posterior.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub mode: Array1<f64>,
    /// Posterior covariance (inverse negative Hessian at the mode).
    pub covariance: Array2<f64>,
    /// Lower Cholesky factor of the covariance.
    pub chol: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-subject design pieces: the random-effect design Z_i (rows (1, z_it)
/// or just (1)) and the fixed-effect linear predictor.
pub struct PanelDesign {
    pub z: Array2<f64>,
    pub base_eta: Array1<f64>,
    pub forward: crate::deepglm::ForwardBatch,
}

pub fn panel_design(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    re: RandomEffects,
    x: &Array2<f64>,
) -> Result<PanelDesign> {
    let fb = forward_batch(spec, map, theta, &x.view())?;
    let t = x.nrows();
    let z = match re {
        RandomEffects::InterceptOnly => Array2::ones((t, 1)),
        RandomEffects::OutputLayer => {
            let zl = fb.acts.last().unwrap();
            let mut z = Array2::ones((t, zl.ncols() + 1));
            z.slice_mut(ndarray::s![.., 1..]).assign(zl);
            z
        }
    };
    Ok(PanelDesign { z, base_eta: fb.eta.clone(), forward: fb })
}

/// log p(y_i | alpha) + log p(alpha | Gamma), dropping the Gamma normalizing
/// constant (it does not depend on alpha). `gamma` holds the diagonal
/// variances.
pub fn f_alpha(
    family: Family,
    design: &PanelDesign,
    y: &ArrayView1<f64>,
    gamma: &Array1<f64>,
    sigma2: f64,
    alpha: &Array1<f64>,
) -> f64 {
    let eta = &design.base_eta + &design.z.dot(alpha);
    let mut f = 0.0;
    for (t, &yt) in y.iter().enumerate() {
        f += log_density_at_eta(family, eta[t], yt, Some(sigma2.ln()));
    }
    for k in 0..alpha.len() {
        f -= 0.5 * alpha[k] * alpha[k] / gamma[k];
    }
    f
}

/// Newton-Raphson (closed form for the gaussian family) maximization of
/// f(alpha), returning the mode and the inverse negative Hessian.
pub fn laplace_mode(
    family: Family,
    design: &PanelDesign,
    y: &ArrayView1<f64>,
    gamma: &Array1<f64>,
    sigma2: f64,
    warm_start: Option<&Array1<f64>>,
) -> Result<LaplaceFit> {
    let k = design.z.ncols();
    if gamma.len() != k {
        return Err(Error::Dimension { what: "gamma length", expected: k, got: gamma.len() });
    }
    let neg_hessian = |alpha: &Array1<f64>| -> Array2<f64> {
        let eta = &design.base_eta + &design.z.dot(alpha);
        let mut a = Array2::<f64>::zeros((k, k));
        for (t, &et) in eta.iter().enumerate() {
            let w = obs_weight_eta(family, et, sigma2);
            let row = design.z.row(t);
            for i in 0..k {
                for j in 0..k {
                    a[(i, j)] += w * row[i] * row[j];
                }
            }
        }
        for i in 0..k {
            a[(i, i)] += 1.0 / gamma[i];
        }
        a
    };

    if family == Family::Gaussian {
        // normal-normal conjugacy: exact mode and covariance
        let a = neg_hessian(&Array1::zeros(k));
        let chol_a = linalg::cholesky(&a)?;
        let resid = y - &design.base_eta;
        let rhs = design.z.t().dot(&resid) / sigma2;
        let mode = linalg::cholesky_solve(&chol_a, &rhs);
        let covariance = linalg::cholesky_inverse(&chol_a);
        let chol = linalg::cholesky(&covariance)?;
        return Ok(LaplaceFit { mode, covariance, chol, converged: true, iterations: 1 });
    }

    let mut alpha = warm_start.cloned().unwrap_or_else(|| Array1::zeros(k));
    let mut f_cur = f_alpha(family, design, y, gamma, sigma2, &alpha);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=100 {
        iterations = it;
        let eta = &design.base_eta + &design.z.dot(&alpha);
        let mut grad = -(&alpha / gamma);
        for (t, &yt) in y.iter().enumerate() {
            let d = dll_deta(family, eta[t], yt, sigma2);
            grad.scaled_add(d, &design.z.row(t));
        }
        if grad.iter().map(|v| v.abs()).fold(0.0, f64::max) <= 1e-8 {
            converged = true;
            break;
        }
        let a = neg_hessian(&alpha);
        let chol_a = linalg::cholesky(&a)?;
        let dir = linalg::cholesky_solve(&chol_a, &grad);
        // step halving until f does not decrease
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &alpha + &(&dir * step);
            let f_new = f_alpha(family, design, y, gamma, sigma2, &cand);
            if f_new >= f_cur - 1e-12 {
                alpha = cand;
                f_cur = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let a = neg_hessian(&alpha);
    let chol_a = linalg::cholesky(&a)?;
    let covariance = linalg::cholesky_inverse(&chol_a);
    let chol = linalg::cholesky(&covariance)?;
    Ok(LaplaceFit { mode: alpha, covariance, chol, converged, iterations })
}

/// Draws from the proposal and the associated log importance weights
/// log w_j = f(alpha_j) + 1/2 (alpha_j - mode)' Cov^{-1} (alpha_j - mode).
#[allow(clippy::too_many_arguments)]
fn is_draws(
    family: Family,
    design: &PanelDesign,
    y: &ArrayView1<f64>,
    gamma: &Array1<f64>,
    sigma2: f64,
    fit: &LaplaceFit,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Array1<f64>>, Vec<f64>)> {
    let k = fit.mode.len();
    let mut draws = Vec::with_capacity(n_samples);
    let mut log_w = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let eps = Array1::from_iter((0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let alpha = &fit.mode + &fit.chol.dot(&eps);
        // (alpha - mode)' Cov^{-1} (alpha - mode) = eps'eps
        let lw = f_alpha(family, design, y, gamma, sigma2, &alpha) + 0.5 * eps.dot(&eps);
        draws.push(alpha);
        log_w.push(lw);
    }
    if log_w.iter().all(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "all importance weights degenerate; increase the sample count or \
             jitter the proposal covariance"
                .into(),
        ));
    }
    Ok((draws, log_w))
}

/// Importance-sampled log likelihood contribution log L_i. The proposal
/// normalizer and the Gamma normalizer dropped from f are folded back in:
/// log L_i = 1/2 log|Cov| - 1/2 log|Gamma| + log mean(w).
#[allow(clippy::too_many_arguments)]
pub fn is_loglik_contribution(
    family: Family,
    design: &PanelDesign,
    y: &ArrayView1<f64>,
    gamma: &Array1<f64>,
    sigma2: f64,
    fit: &LaplaceFit,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (_, log_w) = is_draws(family, design, y, gamma, sigma2, fit, n_samples, rng)?;
    let log_det_cov = 2.0 * fit.chol.diag().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_gamma: f64 = gamma.iter().map(|v| v.ln()).sum();
    Ok(0.5 * log_det_cov - 0.5 * log_det_gamma + linalg::log_sum_exp(&log_w)
        - (n_samples as f64).ln())
}

/// Accumulates the Fisher-identity gradient estimate of log L_i into `grad`
/// (w, beta, dispersion and log-Gamma blocks), scaled by `scale`, and returns
/// the same importance-sampled log L_i from the shared draws.
#[allow(clippy::too_many_arguments)]
pub fn is_gradient_contribution(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    re: RandomEffects,
    design: &PanelDesign,
    y: &ArrayView1<f64>,
    gamma: &Array1<f64>,
    sigma2: f64,
    fit: &LaplaceFit,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
    scale: f64,
    grad: &mut Array1<f64>,
) -> Result<f64> {
    let (draws, log_w) = is_draws(spec.family, design, y, gamma, sigma2, fit, n_samples, rng)?;
    let weights = linalg::softmax(&log_w);
    let ts = theta.as_slice().expect("contiguous theta");
    let family = spec.family;
    let base_out = ArrayView1::from(&ts[map.beta_tilde.clone()]);

    for (alpha, &w) in draws.iter().zip(weights.iter()) {
        if w == 0.0 {
            continue;
        }
        let eta = &design.base_eta + &design.z.dot(alpha);
        let mut deta = Array1::<f64>::zeros(y.len());
        let mut dlogdisp = 0.0;
        for (t, &yt) in y.iter().enumerate() {
            deta[t] = dll_deta(family, eta[t], yt, sigma2);
            if family == Family::Gaussian {
                let r = yt - eta[t];
                dlogdisp += -0.5 + r * r / (2.0 * sigma2);
            }
        }
        // chain through the hidden layers uses the perturbed output weights
        let eff_out: Array1<f64> = match re {
            RandomEffects::InterceptOnly => base_out.to_owned(),
            RandomEffects::OutputLayer => {
                &base_out + &alpha.slice(ndarray::s![1..])
            }
        };
        backprop_eta(spec, map, theta, &design.forward, &deta, &eff_out.view(), scale * w, grad);
        if let Some(i) = map.log_dispersion {
            grad[i] += scale * w * dlogdisp;
        }
        // d log p(alpha | Gamma) / d theta_Gamma_k = -1/2 + alpha_k^2 / (2 Gamma_k)
        for (k, gi) in map.log_gamma.clone().enumerate() {
            grad[gi] += scale * w * (-0.5 + alpha[k] * alpha[k] / (2.0 * gamma[k]));
        }
    }

    let log_det_cov = 2.0 * fit.chol.diag().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_gamma: f64 = gamma.iter().map(|v| v.ln()).sum();
    Ok(0.5 * log_det_cov - 0.5 * log_det_gamma + linalg::log_sum_exp(&log_w)
        - (n_samples as f64).ln())
}

/// Point prediction for one subject: recompute the Laplace mode from the
/// subject's training rows at `theta`, then evaluate the network with output
/// weights beta + mode. Returns (point prediction, linear predictor,
/// used-zero-random-effect flag).
#[allow(clippy::too_many_arguments)]
pub fn panel_predict(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    re: RandomEffects,
    train: Option<(&Array2<f64>, &Array1<f64>)>,
    x_new: &ArrayView1<f64>,
) -> Result<(f64, f64, bool)> {
    let ts = theta.as_slice().expect("contiguous theta");
    let gamma = Array1::from_iter(map.log_gamma.clone().map(|i| ts[i].exp()));
    let sigma2 = map.log_dispersion.map_or(1.0, |i| ts[i].exp());
    let (mode, fallback) = match train {
        None => (Array1::zeros(re.dim(spec)), true),
        Some((x, y)) => {
            let design = panel_design(spec, map, theta, re, x)?;
            let fit = laplace_mode(spec.family, &design, &y.view(), &gamma, sigma2, None)?;
            (fit.mode, false)
        }
    };
    let xm = x_new.view().insert_axis(Axis(0)).to_owned();
    let design_new = panel_design(spec, map, theta, re, &xm)?;
    let eta = design_new.base_eta[0] + design_new.z.row(0).dot(&mode);
    let point = match spec.family {
        Family::Binomial => {
            if eta >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Family::Gaussian => eta,
        Family::Poisson => eta.exp(),
    };
    Ok((point, eta, fallback))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// h(theta~) for the DeepGLMM: sum of importance-sampled log L_i plus the
/// shrinkage prior on (w, beta), Gamma(a0, b0) priors on the random-effect
/// variances through the log transform, and the transform Jacobian.
pub struct DeepGlmmObjective {
    pub spec: NetworkSpec,
    pub map: ParamIndexMap,
    pub data: PanelData,
    pub re: RandomEffects,
    /// Importance-sampling draws per subject per iteration.
    pub n_is: usize,
    pub prior: PriorSpec,
    /// Gamma prior shape and rate on each random-effect variance.
    pub a0: f64,
    pub b0: f64,
    /// Subjects per iteration; None trains on all panels.
    pub subject_batch: Option<usize>,
    seed: u64,
    iteration: usize,
    current: Vec<usize>,
    warm_modes: Vec<Option<Array1<f64>>>,
}

impl DeepGlmmObjective {
    pub fn new(
        spec: NetworkSpec,
        data: PanelData,
        re: RandomEffects,
        n_is: usize,
        prior: PriorSpec,
        seed: u64,
    ) -> Result<DeepGlmmObjective> {
        if n_is == 0 {
            return Err(Error::Config("importance-sample count must be >= 1".into()));
        }
        let map = ParamIndexMap::for_mixed_spec(&spec, re.dim(&spec))?;
        let n = data.n_subjects();
        Ok(DeepGlmmObjective {
            spec,
            map,
            data,
            re,
            n_is,
            prior,
            a0: 1.0,
            b0: 0.1,
            subject_batch: None,
            seed,
            iteration: 0,
            current: (0..n).collect(),
            warm_modes: vec![None; n],
        })
    }

    /// Per-(iteration, subject) noise stream, reproducible and independent
    /// across subjects.
    fn subject_rng(&self, subject_idx: usize) -> ChaCha8Rng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ (self.iteration as u64)));
        rng.set_stream(subject_idx as u64 + 1);
        rng
    }

    /// h and gradient over an explicit set of panel indices, scaled to the
    /// full panel count.
    pub fn h_on_subjects(
        &mut self,
        theta: &Array1<f64>,
        shrink: &ShrinkageState,
        subjects: &[usize],
    ) -> Result<(f64, Array1<f64>)> {
        let ts = theta.as_slice().expect("contiguous theta");
        let gamma = Array1::from_iter(self.map.log_gamma.clone().map(|i| ts[i].exp()));
        let sigma2 = self.map.log_dispersion.map_or(1.0, |i| ts[i].exp());
        let scale = self.data.n_subjects() as f64 / subjects.len().max(1) as f64;

        let mut h = 0.0;
        let mut grad = Array1::<f64>::zeros(self.map.total);
        for &idx in subjects {
            let panel = &self.data.panels[idx];
            let design = panel_design(&self.spec, &self.map, theta, self.re, &panel.x)?;
            let warm = self.warm_modes[idx].as_ref();
            let fit = laplace_mode(
                self.spec.family,
                &design,
                &panel.y.view(),
                &gamma,
                sigma2,
                warm,
            )?;
            let mut rng = self.subject_rng(idx);
            let ll = is_gradient_contribution(
                &self.spec,
                &self.map,
                theta,
                self.re,
                &design,
                &panel.y.view(),
                &gamma,
                sigma2,
                &fit,
                self.n_is,
                &mut rng,
                scale,
                &mut grad,
            )?;
            h += scale * ll;
            self.warm_modes[idx] = Some(fit.mode);
        }

        if let PriorSpec::Shrinkage { bias_var } = self.prior {
            let (pv, pg) = log_prior_and_grad(&self.map, theta, shrink, bias_var);
            h += pv;
            grad += &pg;
        }
        // Gamma(a0, b0) prior through the log transform, plus the Jacobian:
        // contribution a0 * theta_G - b0 * exp(theta_G) up to constants
        let norm_const = self.a0 * self.b0.ln() - ln_gamma(self.a0);
        for gi in self.map.log_gamma.clone() {
            let th = ts[gi];
            h += norm_const + self.a0 * th - self.b0 * th.exp();
            grad[gi] += self.a0 - self.b0 * th.exp();
        }
        Ok((h, grad))
    }
}

impl Objective for DeepGlmmObjective {
    fn dim(&self) -> usize {
        self.map.total
    }

    fn param_map(&self) -> &ParamIndexMap {
        &self.map
    }

    fn initial_shrinkage(&self) -> ShrinkageState {
        ShrinkageState::init(self.map.groups.len(), self.spec.first_hidden())
    }

    fn begin_iteration(&mut self, iteration: usize, rng: &mut ChaCha8Rng) {
        self.iteration = iteration;
        let n = self.data.n_subjects();
        self.current = match self.subject_batch {
            Some(b) => crate::deepglm::sample_batch(n, b, rng),
            None => (0..n).collect(),
        };
    }

    fn h_and_grad(
        &mut self,
        theta: &Array1<f64>,
        shrink: &ShrinkageState,
    ) -> Result<(f64, Array1<f64>)> {
        let subjects = std::mem::take(&mut self.current);
        let out = self.h_on_subjects(theta, shrink, &subjects);
        self.current = subjects;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepglm::ModelParams;
    use approx::assert_relative_eq;
    use ndarray::array;

    const LN_2PI: f64 = 1.8378770664093453;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Intercept-only linear mixed model: y_t = b0 + alpha + e_t. Makes a
    /// (1, 1) "network" so eta = b0 + beta1 * x with x = 0 rows.
    fn lmm_setup(
        beta0: f64,
        sigma2: f64,
        gamma0: f64,
    ) -> (NetworkSpec, ParamIndexMap, Array1<f64>) {
        let spec = NetworkSpec::new(vec![1, 1], Family::Gaussian).unwrap();
        let map = ParamIndexMap::for_mixed_spec(&spec, 1).unwrap();
        let mut theta = Array1::<f64>::zeros(map.total);
        theta[map.beta0] = beta0;
        theta[map.log_dispersion.unwrap()] = sigma2.ln();
        theta[map.log_gamma.start] = gamma0.ln();
        (spec, map, theta)
    }

    fn intercept_only_design(
        spec: &NetworkSpec,
        map: &ParamIndexMap,
        theta: &Array1<f64>,
        t_len: usize,
    ) -> PanelDesign {
        let x = Array2::<f64>::zeros((t_len, 1));
        panel_design(spec, map, theta, RandomEffects::InterceptOnly, &x).unwrap()
    }

    /// Closed-form marginal of the intercept-only gaussian LMM:
    /// y ~ N(base, sigma2 I + gamma 11').
    fn lmm_marginal(y: &Array1<f64>, base: f64, sigma2: f64, gamma: f64) -> f64 {
        let t = y.len();
        let mut v = Array2::<f64>::eye(t) * sigma2;
        v += gamma;
        let chol = linalg::cholesky(&v).unwrap();
        let r = y.mapv(|v| v - base);
        let quad = r.dot(&linalg::cholesky_solve(&chol, &r));
        -0.5 * (t as f64 * LN_2PI + linalg::cholesky_log_det(&chol) + quad)
    }

    #[test]
    fn gaussian_laplace_is_conjugate_posterior() {
        // flat-ish prior, many rows: mode approaches the per-subject mean offset
        let (spec, map, theta) = lmm_setup(0.5, 1.0, 100.0);
        let t_len = 200;
        let mut r = rng(3);
        let y = Array1::from_iter(
            (0..t_len).map(|_| 0.5 + 1.3 + r.sample::<f64, _>(StandardNormal)),
        );
        let design = intercept_only_design(&spec, &map, &theta, t_len);
        let fit = laplace_mode(
            Family::Gaussian,
            &design,
            &y.view(),
            &array![100.0],
            1.0,
            None,
        )
        .unwrap();
        let offset = y.mean().unwrap() - 0.5;
        // exact conjugate mode: (T/s2 + 1/G)^{-1} * T/s2 * offset
        let want = (t_len as f64 / (t_len as f64 + 1.0 / 100.0)) * offset;
        assert_relative_eq!(fit.mode[0], want, epsilon = 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn binomial_prior_domination_shrinks_mode() {
        let spec = NetworkSpec::new(vec![1, 1], Family::Binomial).unwrap();
        let map = ParamIndexMap::for_mixed_spec(&spec, 1).unwrap();
        let theta = Array1::<f64>::zeros(map.total);
        let t_len = 8;
        let x = Array2::<f64>::zeros((t_len, 1));
        let design = panel_design(&spec, &map, &theta, RandomEffects::InterceptOnly, &x).unwrap();
        let y = Array1::ones(t_len); // all successes push alpha up
        let gamma = array![0.01];
        let fit =
            laplace_mode(Family::Binomial, &design, &y.view(), &gamma, 1.0, None).unwrap();
        assert!(fit.converged);
        assert!(fit.mode[0].abs() < 3.0 * 0.01f64.sqrt(), "mode {}", fit.mode[0]);
        assert!(fit.mode[0] > 0.0);
    }

    #[test]
    fn binomial_laplace_matches_grid_search() {
        // T = 6 rows, 3-dimensional random effect; two-stage lattice search
        let spec = NetworkSpec::new(vec![2, 2, 1], Family::Binomial).unwrap();
        let map = ParamIndexMap::for_mixed_spec(&spec, 3).unwrap();
        let mut r = rng(7);
        let mut theta = Array1::from_iter(
            (0..map.total).map(|_| r.sample::<f64, _>(StandardNormal) * 0.5),
        );
        for gi in map.log_gamma.clone() {
            theta[gi] = 0.0;
        }
        let x = Array2::from_shape_fn((6, 2), |_| r.sample::<f64, _>(StandardNormal));
        let y = array![1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let gamma = array![1.0, 1.0, 1.0];
        let design = panel_design(&spec, &map, &theta, RandomEffects::OutputLayer, &x).unwrap();
        let fit =
            laplace_mode(Family::Binomial, &design, &y.view(), &gamma, 1.0, None).unwrap();
        assert!(fit.converged);

        let f = |a: &Array1<f64>| f_alpha(Family::Binomial, &design, &y.view(), &gamma, 1.0, a);
        let mut best = fit.mode.clone();
        // stage 1: coarse lattice around zero; stage 2: fine lattice around stage-1 best
        for (center, half, step) in
            [(Array1::<f64>::zeros(3), 2.0, 0.1), (best.clone(), 0.15, 1e-3)]
        {
            let center = center.clone();
            let n_steps = (2.0 * half / step) as i64 + 1;
            let mut best_val = f64::NEG_INFINITY;
            let mut arg = center.clone();
            for i in 0..n_steps {
                for j in 0..n_steps {
                    for k in 0..n_steps {
                        let cand = array![
                            center[0] - half + i as f64 * step,
                            center[1] - half + j as f64 * step,
                            center[2] - half + k as f64 * step
                        ];
                        let v = f(&cand);
                        if v > best_val {
                            best_val = v;
                            arg = cand;
                        }
                    }
                }
            }
            best = arg;
        }
        for i in 0..3 {
            assert!(
                (fit.mode[i] - best[i]).abs() <= 1.5e-3,
                "coord {i}: newton {} vs grid {}",
                fit.mode[i],
                best[i]
            );
        }
    }

    #[test]
    fn laplace_covariance_is_positive_definite() {
        // Cholesky of the covariance succeeds at every converged fit
        let spec = NetworkSpec::new(vec![2, 3, 1], Family::Binomial).unwrap();
        let map = ParamIndexMap::for_mixed_spec(&spec, 4).unwrap();
        let mut r = rng(11);
        for trial in 0..20 {
            let theta = Array1::from_iter(
                (0..map.total).map(|_| r.sample::<f64, _>(StandardNormal) * 0.4),
            );
            let x = Array2::from_shape_fn((5, 2), |_| r.sample::<f64, _>(StandardNormal));
            let y = Array1::from_iter((0..5).map(|_| f64::from(r.random::<bool>())));
            let gamma = array![0.5, 0.5, 0.5, 0.5];
            let design =
                panel_design(&spec, &map, &theta, RandomEffects::OutputLayer, &x).unwrap();
            let fit = laplace_mode(Family::Binomial, &design, &y.view(), &gamma, 1.0, None)
                .unwrap();
            assert!(fit.converged, "trial {trial} did not converge");
            assert!(linalg::cholesky(&fit.covariance).is_ok());
        }
    }

    #[test]
    fn single_draw_weight_is_one() {
        let (spec, map, theta) = lmm_setup(0.0, 1.0, 0.5);
        let design = intercept_only_design(&spec, &map, &theta, 4);
        let y = array![0.3, -0.2, 1.0, 0.4];
        let gamma = array![0.5];
        let fit =
            laplace_mode(Family::Gaussian, &design, &y.view(), &gamma, 1.0, None).unwrap();
        let mut r = rng(13);
        let (_, log_w) =
            is_draws(Family::Gaussian, &design, &y.view(), &gamma, 1.0, &fit, 1, &mut r)
                .unwrap();
        let w = linalg::softmax(&log_w);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn gaussian_is_loglik_matches_analytic_marginal() {
        let (spec, map, theta) = lmm_setup(0.3, 0.8, 0.4);
        let t_len = 8;
        let mut r = rng(17);
        let y = Array1::from_iter(
            (0..t_len).map(|_| 0.3 + 0.5 + 0.9 * r.sample::<f64, _>(StandardNormal)),
        );
        let design = intercept_only_design(&spec, &map, &theta, t_len);
        let gamma = array![0.4];
        let fit =
            laplace_mode(Family::Gaussian, &design, &y.view(), &gamma, 0.8, None).unwrap();
        let mut r2 = rng(18);
        let ll = is_loglik_contribution(
            Family::Gaussian,
            &design,
            &y.view(),
            &gamma,
            0.8,
            &fit,
            10_000,
            &mut r2,
        )
        .unwrap();
        let want = lmm_marginal(&y, 0.3, 0.8, 0.4);
        assert!((ll - want).abs() < 0.01 * want.abs(), "{ll} vs {want}");
    }

    #[test]
    fn degenerate_random_effect_reduces_to_fixed_density() {
        // T = 1 binomial with Gamma -> 0: L_i -> p(y | alpha = 0)
        let spec = NetworkSpec::new(vec![1, 1], Family::Binomial).unwrap();
        let map = ParamIndexMap::for_mixed_spec(&spec, 1).unwrap();
        let mut theta = Array1::<f64>::zeros(map.total);
        theta[map.beta0] = 0.7;
        let x = Array2::<f64>::zeros((1, 1));
        let design = panel_design(&spec, &map, &theta, RandomEffects::InterceptOnly, &x).unwrap();
        let y = array![1.0];
        let gamma = array![1e-8];
        let fit =
            laplace_mode(Family::Binomial, &design, &y.view(), &gamma, 1.0, None).unwrap();
        let mut r = rng(19);
        let ll = is_loglik_contribution(
            Family::Binomial,
            &design,
            &y.view(),
            &gamma,
            1.0,
            &fit,
            2000,
            &mut r,
        )
        .unwrap();
        let want = crate::deepglm::log_density_at_eta(Family::Binomial, 0.7, 1.0, None);
        assert!((ll - want).abs() < 1e-3, "{ll} vs {want}");
    }

    #[test]
    fn is_estimator_unbiased_on_natural_scale() {
        // mean of L-hat over replications brackets the quadrature value
        let spec = NetworkSpec::new(vec![1, 1], Family::Binomial).unwrap();
        let map = ParamIndexMap::for_mixed_spec(&spec, 1).unwrap();
        let mut theta = Array1::<f64>::zeros(map.total);
        theta[map.beta0] = 0.4;
        theta[map.log_gamma.start] = 0.5f64.ln();
        let x = Array2::<f64>::zeros((3, 1));
        let design = panel_design(&spec, &map, &theta, RandomEffects::InterceptOnly, &x).unwrap();
        let y = array![1.0, 0.0, 1.0];
        let gamma = array![0.5];
        let fit =
            laplace_mode(Family::Binomial, &design, &y.view(), &gamma, 1.0, None).unwrap();

        // 51-point adaptive Gauss-Hermite quadrature for the exact value
        let (nodes, weights) = linalg::gauss_hermite(51);
        let sd = fit.covariance[(0, 0)].sqrt();
        let mut terms = Vec::new();
        for (xi, wi) in nodes.iter().zip(weights.iter()) {
            let a = array![fit.mode[0] + std::f64::consts::SQRT_2 * sd * xi];
            terms.push(
                wi.ln()
                    + xi * xi
                    + f_alpha(Family::Binomial, &design, &y.view(), &gamma, 1.0, &a),
            );
        }
        let log_int = (std::f64::consts::SQRT_2 * sd).ln() + linalg::log_sum_exp(&terms);
        let exact_ll = -0.5 * LN_2PI - 0.5 * gamma[0].ln() + log_int;

        let reps = 200;
        let n = 50;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for k in 0..reps {
            let mut r = rng(500 + k);
            let ll = is_loglik_contribution(
                Family::Binomial,
                &design,
                &y.view(),
                &gamma,
                1.0,
                &fit,
                n,
                &mut r,
            )
            .unwrap();
            let l = ll.exp();
            sum += l;
            sum_sq += l * l;
        }
        let mean = sum / reps as f64;
        let var = sum_sq / reps as f64 - mean * mean;
        let se = (var / reps as f64).sqrt();
        let exact = exact_ll.exp();
        assert!(
            (mean - exact).abs() <= 3.0 * se.max(1e-12),
            "mean {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn weights_invariant_to_constant_shift_of_f() {
        // the log-space normalization ignores constant offsets in f
        let lw = [-3.0, -1.0, -2.5, 0.0];
        let shifted: Vec<f64> = lw.iter().map(|v| v + 1000.0).collect();
        let w1 = linalg::softmax(&lw);
        let w2 = linalg::softmax(&shifted);
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_is_gradient_matches_analytic() {
        // finite differences of the closed-form marginal vs the IS gradient
        let (spec, map, theta) = lmm_setup(0.3, 0.8, 0.4);
        let t_len = 6;
        let mut r = rng(23);
        let y = Array1::from_iter(
            (0..t_len).map(|_| 0.3 - 0.4 + 0.9 * r.sample::<f64, _>(StandardNormal)),
        );
        let x = Array2::<f64>::zeros((t_len, 1));

        let analytic_grad = {
            let h = 1e-6;
            let mut g = Array1::<f64>::zeros(map.total);
            for k in [map.beta0, map.log_dispersion.unwrap(), map.log_gamma.start] {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let fp = lmm_marginal(&y, tp[map.beta0], tp[map.log_dispersion.unwrap()].exp(),
                    tp[map.log_gamma.start].exp());
                let fm = lmm_marginal(&y, tm[map.beta0], tm[map.log_dispersion.unwrap()].exp(),
                    tm[map.log_gamma.start].exp());
                g[k] = (fp - fm) / (2.0 * h);
            }
            g
        };

        let reps = 30;
        let n = 10_000;
        let mut means = Array1::<f64>::zeros(map.total);
        let mut sq = Array1::<f64>::zeros(map.total);
        for rep in 0..reps {
            let design =
                panel_design(&spec, &map, &theta, RandomEffects::InterceptOnly, &x).unwrap();
            let gamma = array![0.4];
            let fit =
                laplace_mode(Family::Gaussian, &design, &y.view(), &gamma, 0.8, None).unwrap();
            let mut grad = Array1::<f64>::zeros(map.total);
            let mut r2 = rng(900 + rep);
            is_gradient_contribution(
                &spec,
                &map,
                &theta,
                RandomEffects::InterceptOnly,
                &design,
                &y.view(),
                &gamma,
                0.8,
                &fit,
                n,
                &mut r2,
                1.0,
                &mut grad,
            )
            .unwrap();
            means += &grad;
            sq += &grad.mapv(|v| v * v);
        }
        for k in [map.beta0, map.log_dispersion.unwrap(), map.log_gamma.start] {
            let mean = means[k] / reps as f64;
            let var = sq[k] / reps as f64 - mean * mean;
            let se = (var / reps as f64).sqrt();
            assert!(
                (mean - analytic_grad[k]).abs() <= 3.0 * se.max(2e-4),
                "coord {k}: IS {mean} vs analytic {} (se {se})",
                analytic_grad[k]
            );
        }
    }

    /// Quadrature-exact h for a tiny binomial mixed model, used to check the
    /// assembled gradient by finite differences.
    fn quad_h(
        spec: &NetworkSpec,
        map: &ParamIndexMap,
        theta: &Array1<f64>,
        panels: &[(Array2<f64>, Array1<f64>)],
        a0: f64,
        b0: f64,
        bias_var: f64,
        shrink: &ShrinkageState,
    ) -> f64 {
        let ts = theta.as_slice().unwrap();
        let gamma = ts[map.log_gamma.start].exp();
        let (nodes, weights) = linalg::gauss_hermite(51);
        let mut h = 0.0;
        for (x, y) in panels {
            let design =
                panel_design(spec, map, theta, RandomEffects::InterceptOnly, x).unwrap();
            let fit = laplace_mode(
                Family::Binomial,
                &design,
                &y.view(),
                &array![gamma],
                1.0,
                None,
            )
            .unwrap();
            let sd = fit.covariance[(0, 0)].sqrt();
            let mut terms = Vec::new();
            for (xi, wi) in nodes.iter().zip(weights.iter()) {
                let a = array![fit.mode[0] + std::f64::consts::SQRT_2 * sd * xi];
                terms.push(
                    wi.ln()
                        + xi * xi
                        + f_alpha(Family::Binomial, &design, &y.view(), &array![gamma], 1.0, &a),
                );
            }
            h += -0.5 * LN_2PI - 0.5 * gamma.ln()
                + (std::f64::consts::SQRT_2 * sd).ln()
                + linalg::log_sum_exp(&terms);
        }
        let (pv, _) = log_prior_and_grad(map, theta, shrink, bias_var);
        h += pv;
        let th = ts[map.log_gamma.start];
        h += a0 * b0.ln() - ln_gamma(a0) + a0 * th - b0 * th.exp();
        h
    }

    #[test]
    fn assembled_gradient_matches_quadrature_fd() {
        // 2-subject binomial toy with a scalar random intercept
        let spec = NetworkSpec::new(vec![2, 2, 1], Family::Binomial).unwrap();
        let mut r = rng(31);
        let x1 = Array2::from_shape_fn((3, 2), |_| r.sample::<f64, _>(StandardNormal));
        let x2 = Array2::from_shape_fn((3, 2), |_| r.sample::<f64, _>(StandardNormal));
        let y1 = array![1.0, 0.0, 1.0];
        let y2 = array![0.0, 0.0, 1.0];
        let data = PanelData::new(vec![
            Panel { subject: "a".into(), x: x1.clone(), y: y1.clone() },
            Panel { subject: "b".into(), x: x2.clone(), y: y2.clone() },
        ])
        .unwrap();
        let mut obj = DeepGlmmObjective::new(
            spec.clone(),
            data,
            RandomEffects::InterceptOnly,
            100_000,
            PriorSpec::Shrinkage { bias_var: 100.0 },
            5,
        )
        .unwrap();
        let map = obj.map.clone();
        let mut theta = Array1::from_iter(
            (0..map.total).map(|_| r.sample::<f64, _>(StandardNormal) * 0.4),
        );
        theta[map.log_gamma.start] = 0.3f64.ln();
        let shrink = obj.initial_shrinkage();

        obj.iteration = 1;
        let subjects: Vec<usize> = vec![0, 1];
        let (_, grad) = obj.h_on_subjects(&theta, &shrink, &subjects).unwrap();

        let panels = vec![(x1, y1), (x2, y2)];
        let h = 1e-4;
        let mut fd = Array1::<f64>::zeros(map.total);
        for k in 0..map.total {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let hp = quad_h(&spec, &map, &tp, &panels, 1.0, 0.1, 100.0, &shrink);
            let hm = quad_h(&spec, &map, &tm, &panels, 1.0, 0.1, 100.0, &shrink);
            fd[k] = (hp - hm) / (2.0 * h);
        }
        let rel =
            (&grad - &fd).mapv(|v| v * v).sum().sqrt() / fd.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 1e-2, "relative error {rel}");
    }

    #[test]
    fn prior_only_h_has_gamma_jacobian_gradient() {
        // with a flat (w, beta) prior and no panels, dh/dtheta_G = a0 - b0 e^theta_G
        let spec = NetworkSpec::new(vec![1, 1], Family::Binomial).unwrap();
        let data = PanelData::new(vec![Panel {
            subject: "a".into(),
            x: Array2::zeros((1, 1)),
            y: array![1.0],
        }])
        .unwrap();
        let mut obj = DeepGlmmObjective::new(
            spec,
            data,
            RandomEffects::InterceptOnly,
            10,
            PriorSpec::Flat,
            1,
        )
        .unwrap();
        let map = obj.map.clone();
        let mut theta = Array1::<f64>::zeros(map.total);
        theta[map.log_gamma.start] = 0.4;
        let shrink = obj.initial_shrinkage();
        obj.iteration = 1;
        // no subjects: the likelihood part drops out entirely
        let (h, grad) = obj.h_on_subjects(&theta, &shrink, &[]).unwrap();
        let th: f64 = 0.4;
        let want_grad = 1.0 - 0.1 * th.exp();
        assert_relative_eq!(grad[map.log_gamma.start], want_grad, epsilon = 1e-12);
        let want_h = 1.0 * 0.1f64.ln() - ln_gamma(1.0) + th - 0.1 * th.exp();
        assert_relative_eq!(h, want_h, epsilon = 1e-12);
        // and by finite differences
        let hstep = 1e-6;
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[map.log_gamma.start] += hstep;
        tm[map.log_gamma.start] -= hstep;
        let (hp, _) = obj.h_on_subjects(&tp, &shrink, &[]).unwrap();
        let (hm, _) = obj.h_on_subjects(&tm, &shrink, &[]).unwrap();
        assert_relative_eq!(
            (hp - hm) / (2.0 * hstep),
            grad[map.log_gamma.start],
            epsilon = 1e-6
        );
    }

    #[test]
    fn panel_predict_limits_and_boundary() {
        let spec = NetworkSpec::new(vec![2, 2, 1], Family::Binomial).unwrap();
        let map = ParamIndexMap::for_mixed_spec(&spec, 1).unwrap();
        let mut r = rng(41);
        let mut theta = Array1::from_iter(
            (0..map.total).map(|_| r.sample::<f64, _>(StandardNormal) * 0.5),
        );
        theta[map.log_gamma.start] = (1e-10f64).ln(); // Gamma -> 0
        let x_train = Array2::from_shape_fn((5, 2), |_| r.sample::<f64, _>(StandardNormal));
        let y_train = array![1.0, 0.0, 1.0, 1.0, 0.0];
        let x_new = array![0.4, -0.2];

        // Gamma -> 0: the mode collapses to zero and prediction equals the
        // fixed-effect one
        let (_, eta_re, _) = panel_predict(
            &spec,
            &map,
            &theta,
            RandomEffects::InterceptOnly,
            Some((&x_train, &y_train)),
            &x_new.view(),
        )
        .unwrap();
        let (_, eta_fixed) =
            crate::deepglm::forward(&spec, &map, &theta, &x_new.view()).unwrap();
        assert!((eta_re - eta_fixed).abs() < 1e-6, "{eta_re} vs {eta_fixed}");

        // unseen subject falls back to alpha = 0 with the flag set
        let (_, eta0, fallback) = panel_predict(
            &spec,
            &map,
            &theta,
            RandomEffects::InterceptOnly,
            None,
            &x_new.view(),
        )
        .unwrap();
        assert!(fallback);
        assert!((eta0 - eta_fixed).abs() < 1e-12);

        // decision boundary: eta = 0 classifies as 1
        let mut theta0 = Array1::<f64>::zeros(map.total);
        theta0[map.log_gamma.start] = (1e-10f64).ln();
        let (class, eta, _) = panel_predict(
            &spec,
            &map,
            &theta0,
            RandomEffects::InterceptOnly,
            None,
            &x_new.view(),
        )
        .unwrap();
        assert_eq!(eta, 0.0);
        assert_eq!(class, 1.0);
    }

    #[test]
    fn gaussian_intercept_prediction_is_conjugate_offset() {
        let (spec, map, theta) = lmm_setup(0.5, 1.0, 2.0);
        let t_len = 10;
        let mut r = rng(47);
        let y = Array1::from_iter(
            (0..t_len).map(|_| 0.5 + 0.8 + 0.3 * r.sample::<f64, _>(StandardNormal)),
        );
        let x_train = Array2::<f64>::zeros((t_len, 1));
        let (point, _, _) = panel_predict(
            &spec,
            &map,
            &theta,
            RandomEffects::InterceptOnly,
            Some((&x_train, &y)),
            &array![0.0].view(),
        )
        .unwrap();
        let offset = y.mean().unwrap() - 0.5;
        let shrunk = (t_len as f64 / (t_len as f64 + 1.0 / 2.0)) * offset;
        assert_relative_eq!(point, 0.5 + shrunk, epsilon = 1e-10);
    }

    #[test]
    fn is_loglik_error_shrinks_with_sample_size() {
        // root-mean-square error vs the analytic marginal decays like
        // 1/sqrt(N) once the proposal is deliberately imperfect
        let (spec, map, theta) = lmm_setup(0.0, 1.0, 0.5);
        let t_len = 6;
        let mut r = rng(53);
        let y = Array1::from_iter(
            (0..t_len).map(|_| 0.6 + r.sample::<f64, _>(StandardNormal)),
        );
        let design = intercept_only_design(&spec, &map, &theta, t_len);
        let gamma = array![0.5];
        let exact = lmm_marginal(&y, 0.0, 1.0, 0.5);
        let fit =
            laplace_mode(Family::Gaussian, &design, &y.view(), &gamma, 1.0, None).unwrap();
        // widen and shift the proposal so the weights are non-constant
        let wide = LaplaceFit {
            mode: &fit.mode + 0.5,
            covariance: &fit.covariance * 2.0,
            chol: &fit.chol * std::f64::consts::SQRT_2,
            converged: true,
            iterations: fit.iterations,
        };
        let mut rmse = Vec::new();
        for (i, n) in [100usize, 1000, 10_000].into_iter().enumerate() {
            let reps = 60;
            let mut sq = 0.0;
            for k in 0..reps {
                let mut r2 = rng(7000 + 100 * i as u64 + k);
                let ll = is_loglik_contribution(
                    Family::Gaussian,
                    &design,
                    &y.view(),
                    &gamma,
                    1.0,
                    &wide,
                    n,
                    &mut r2,
                )
                .unwrap();
                sq += (ll - exact).powi(2);
            }
            rmse.push((sq / reps as f64).sqrt());
        }
        // slope of log rmse vs log n across the two decades
        let slope = (rmse[2].ln() - rmse[0].ln()) / (10_000f64.ln() - 100f64.ln());
        assert!(
            (slope + 0.5).abs() < 0.15,
            "slope {slope}, rmse {rmse:?}"
        );
    }
}

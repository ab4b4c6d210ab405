//! DeepGLM: exponential-family responses whose linear predictor is the scalar
//! output of a feedforward network, with adaptive group-lasso shrinkage on the
//! first-layer weights and ridge regularization on the rest.
//!
//! Parameters are packed into one flat theta vector. First-layer weights are
//! stored column-major so each covariate's group is contiguous; then biases,
//! deeper layers, the output weights, an optional linear part, and an optional
//! log dispersion. `ParamIndexMap` records the layout.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};
use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::factor_gaussian::FactorGaussian;
use crate::trainer::Objective;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Identity link, unknown variance carried as log sigma^2.
    Gaussian,
    /// Logit link, y in {0, 1}.
    Binomial,
    /// Log link, y a nonnegative integer.
    Poisson,
}

impl Family {
    pub fn has_dispersion(&self) -> bool {
        matches!(self, Family::Gaussian)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "binomial" => Ok(Family::Binomial),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// (p, m_1, ..., m_L, 1). Two entries mean no hidden layer: a plain GLM.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub family: Family,
    /// Covariate indices (into the full covariate vector) that enter the
    /// linear predictor directly instead of through the network.
    pub linear_part_indices: Option<Vec<usize>>,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, family: Family) -> Result<Self> {
        let spec = NetworkSpec {
            layer_sizes,
            activation: Activation::Relu,
            family,
            linear_part_indices: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_linear_part(mut self, indices: Vec<usize>) -> Result<Self> {
        self.linear_part_indices = Some(indices);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("layer_sizes needs at least (input, 1)".into()));
        }
        if *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::Config("final layer size must be 1".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if let Some(idx) = &self.linear_part_indices {
            let p_full = self.covariate_dim();
            let mut seen = std::collections::HashSet::new();
            for &i in idx {
                if i >= p_full {
                    return Err(Error::Config(format!(
                        "linear-part index {i} out of range for {p_full} covariates"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Config(format!("duplicate linear-part index {i}")));
                }
            }
        }
        Ok(())
    }

    /// Number of covariates entering the network.
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Total covariates: network inputs plus the linear part.
    pub fn covariate_dim(&self) -> usize {
        self.input_dim() + self.linear_part_indices.as_ref().map_or(0, |v| v.len())
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    /// Size of the last hidden layer (the predictors z); the input itself
    /// when there is no hidden layer.
    pub fn last_hidden(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    /// Units in the first hidden layer, i.e. the group size for the
    /// group-lasso prior. Zero when the model is a plain GLM.
    pub fn first_hidden(&self) -> usize {
        if self.hidden_layers() >= 1 {
            self.layer_sizes[1]
        } else {
            0
        }
    }
}

/// Index map over the flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamIndexMap {
    pub total: usize,
    /// (offset, rows, cols) per hidden layer; weights stored column-major.
    pub layer_weights: Vec<(usize, usize, usize)>,
    /// (offset, len) per hidden layer.
    pub layer_biases: Vec<(usize, usize)>,
    pub beta0: usize,
    pub beta_tilde: Range<usize>,
    pub beta_linear: Range<usize>,
    pub log_dispersion: Option<usize>,
    /// Log-variances of the random-effect covariance; empty for fixed models.
    pub log_gamma: Range<usize>,
    /// Per-covariate first-layer weight groups w_{X_j}.
    pub groups: Vec<Range<usize>>,
    /// The ridge set: every weight that is neither a first-layer group member
    /// nor a bias.
    pub ridge: Vec<usize>,
    /// All intercepts, including the output intercept.
    pub biases: Vec<usize>,
    /// Weight ranges with their uniform initialization bound sqrt(6/(fan_in+fan_out)).
    pub glorot: Vec<(Range<usize>, f64)>,
}

impl ParamIndexMap {
    pub fn for_spec(spec: &NetworkSpec) -> Result<ParamIndexMap> {
        spec.validate()?;
        Self::build(spec, 0)
    }

    /// Layout with `re_dim` random-effect log-variances appended (DeepGLMM).
    pub fn for_mixed_spec(spec: &NetworkSpec, re_dim: usize) -> Result<ParamIndexMap> {
        spec.validate()?;
        Self::build(spec, re_dim)
    }

    fn build(spec: &NetworkSpec, re_dim: usize) -> Result<ParamIndexMap> {
        let sizes = &spec.layer_sizes;
        let n_hidden = spec.hidden_layers();
        let mut off = 0;
        let mut layer_weights = Vec::new();
        let mut layer_biases = Vec::new();
        let mut groups = Vec::new();
        let mut ridge = Vec::new();
        let mut biases = Vec::new();
        let mut glorot = Vec::new();

        for l in 0..n_hidden {
            let rows = sizes[l + 1];
            let cols = sizes[l];
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            glorot.push((off..off + rows * cols, bound));
            layer_weights.push((off, rows, cols));
            if l == 0 {
                for j in 0..cols {
                    groups.push(off + j * rows..off + (j + 1) * rows);
                }
            } else {
                ridge.extend(off..off + rows * cols);
            }
            off += rows * cols;
            layer_biases.push((off, rows));
            biases.extend(off..off + rows);
            off += rows;
        }

        let beta0 = off;
        biases.push(beta0);
        off += 1;
        let m = spec.last_hidden();
        let n_lin = spec.linear_part_indices.as_ref().map_or(0, |v| v.len());
        let beta_tilde = off..off + m;
        off += m;
        let beta_linear = off..off + n_lin;
        off += n_lin;
        ridge.extend(beta_tilde.clone());
        ridge.extend(beta_linear.clone());
        let out_bound = (6.0 / (m + n_lin + 1) as f64).sqrt();
        glorot.push((beta_tilde.start..beta_linear.end, out_bound));

        let log_dispersion = if spec.family.has_dispersion() {
            let i = off;
            off += 1;
            Some(i)
        } else {
            None
        };
        let log_gamma = off..off + re_dim;
        off += re_dim;

        Ok(ParamIndexMap {
            total: off,
            layer_weights,
            layer_biases,
            beta0,
            beta_tilde,
            beta_linear,
            log_dispersion,
            log_gamma,
            groups,
            ridge,
            biases,
            glorot,
        })
    }

    pub fn weight_view<'a>(&self, theta: &'a [f64], layer: usize) -> ArrayView2<'a, f64> {
        let (off, rows, cols) = self.layer_weights[layer];
        ArrayView2::from_shape((rows, cols).f(), &theta[off..off + rows * cols]).unwrap()
    }

    pub fn bias_view<'a>(&self, theta: &'a [f64], layer: usize) -> ArrayView1<'a, f64> {
        let (off, len) = self.layer_biases[layer];
        ArrayView1::from(&theta[off..off + len])
    }
}

/// Structured view of the packed parameters; convenient for tests and for
/// code that does not need the flat layout.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub beta0: f64,
    pub beta_tilde: Array1<f64>,
    pub beta_linear: Array1<f64>,
    pub log_dispersion: Option<f64>,
}

impl ModelParams {
    pub fn unpack(map: &ParamIndexMap, theta: &Array1<f64>) -> Result<ModelParams> {
        if theta.len() != map.total {
            return Err(Error::Dimension {
                what: "theta length",
                expected: map.total,
                got: theta.len(),
            });
        }
        let ts = theta.as_slice().expect("contiguous theta");
        let layers = (0..map.layer_weights.len())
            .map(|l| (map.weight_view(ts, l).to_owned(), map.bias_view(ts, l).to_owned()))
            .collect();
        Ok(ModelParams {
            layers,
            beta0: ts[map.beta0],
            beta_tilde: ArrayView1::from(&ts[map.beta_tilde.clone()]).to_owned(),
            beta_linear: ArrayView1::from(&ts[map.beta_linear.clone()]).to_owned(),
            log_dispersion: map.log_dispersion.map(|i| ts[i]),
        })
    }

    pub fn pack(&self, map: &ParamIndexMap) -> Array1<f64> {
        let mut theta = Array1::<f64>::zeros(map.total);
        {
            let ts = theta.as_slice_mut().unwrap();
            for (l, (w, b)) in self.layers.iter().enumerate() {
                let (off, rows, cols) = map.layer_weights[l];
                for j in 0..cols {
                    for i in 0..rows {
                        ts[off + j * rows + i] = w[(i, j)];
                    }
                }
                let (boff, blen) = map.layer_biases[l];
                ts[boff..boff + blen].copy_from_slice(b.as_slice().unwrap());
            }
            ts[map.beta0] = self.beta0;
            if !self.beta_tilde.is_empty() {
                ts[map.beta_tilde.clone()].copy_from_slice(self.beta_tilde.as_slice().unwrap());
            }
            if !self.beta_linear.is_empty() {
                ts[map.beta_linear.clone()].copy_from_slice(self.beta_linear.as_slice().unwrap());
            }
            if let (Some(i), Some(v)) = (map.log_dispersion, self.log_dispersion) {
                ts[i] = v;
            }
        }
        theta
    }
}

/// Splits the full covariate matrix into (network inputs, linear part).
pub fn split_covariates(spec: &NetworkSpec, x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    match &spec.linear_part_indices {
        None => (x.to_owned(), Array2::zeros((x.nrows(), 0))),
        Some(lin) => {
            let lin_set: std::collections::HashSet<usize> = lin.iter().copied().collect();
            let net_cols: Vec<usize> = (0..x.ncols()).filter(|i| !lin_set.contains(i)).collect();
            let xn = x.select(Axis(1), &net_cols);
            let xl = x.select(Axis(1), lin);
            (xn, xl)
        }
    }
}

/// Activations per layer for a batch. `acts[0]` is the network input,
/// `acts[l]` the l-th hidden layer output; `eta` the linear predictor.
pub struct ForwardBatch {
    pub acts: Vec<Array2<f64>>,
    pub x_lin: Array2<f64>,
    pub eta: Array1<f64>,
}

pub fn forward_batch(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    x: &ArrayView2<f64>,
) -> Result<ForwardBatch> {
    if x.ncols() != spec.covariate_dim() {
        return Err(Error::Dimension {
            what: "covariate columns",
            expected: spec.covariate_dim(),
            got: x.ncols(),
        });
    }
    let ts = theta.as_slice().expect("contiguous theta");
    let (x_net, x_lin) = split_covariates(spec, x);
    let mut acts = vec![x_net];
    for l in 0..spec.hidden_layers() {
        let w = map.weight_view(ts, l);
        let b = map.bias_view(ts, l);
        let mut a = acts[l].dot(&w.t());
        a += &b;
        a.mapv_inplace(|v| v.max(0.0));
        acts.push(a);
    }
    let beta_tilde = ArrayView1::from(&ts[map.beta_tilde.clone()]);
    let mut eta = acts.last().unwrap().dot(&beta_tilde);
    eta += ts[map.beta0];
    if x_lin.ncols() > 0 {
        let beta_lin = ArrayView1::from(&ts[map.beta_linear.clone()]);
        eta += &x_lin.dot(&beta_lin);
    }
    Ok(ForwardBatch { acts, x_lin, eta })
}

/// Single-row forward pass: returns the last hidden layer z and the linear
/// predictor eta.
pub fn forward(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    x: &ArrayView1<f64>,
) -> Result<(Array1<f64>, f64)> {
    let xm = x.view().insert_axis(Axis(0));
    let fb = forward_batch(spec, map, theta, &xm)?;
    Ok((fb.acts.last().unwrap().row(0).to_owned(), fb.eta[0]))
}

/// Accumulates `weight * sum_r deta[r] * d eta_r / d theta` into `grad`.
///
/// `out_weights` are the effective output weights used in the chain rule
/// through the hidden layers (beta_tilde, or beta_tilde + alpha_i for mixed
/// models); the gradient written to the beta_tilde slots is z'deta either way.
#[allow(clippy::too_many_arguments)]
pub fn backprop_eta(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    fb: &ForwardBatch,
    deta: &Array1<f64>,
    out_weights: &ArrayView1<f64>,
    weight: f64,
    grad: &mut Array1<f64>,
) {
    let ts = theta.as_slice().expect("contiguous theta");
    let gs = grad.as_slice_mut().expect("contiguous grad");
    let z = fb.acts.last().unwrap();

    gs[map.beta0] += weight * deta.sum();
    let gbt = z.t().dot(deta);
    for (k, i) in map.beta_tilde.clone().enumerate() {
        gs[i] += weight * gbt[k];
    }
    if fb.x_lin.ncols() > 0 {
        let gbl = fb.x_lin.t().dot(deta);
        for (k, i) in map.beta_linear.clone().enumerate() {
            gs[i] += weight * gbl[k];
        }
    }

    let n_hidden = spec.hidden_layers();
    if n_hidden == 0 {
        return;
    }
    // delta_L = (deta outer out_weights) o relu'(S_L); relu' is read off the
    // stored activations, with subgradient 0 at exactly 0.
    let mut delta = {
        let mut d = Array2::<f64>::zeros(z.raw_dim());
        for (r, &dr) in deta.iter().enumerate() {
            for k in 0..z.ncols() {
                if z[(r, k)] > 0.0 {
                    d[(r, k)] = dr * out_weights[k];
                }
            }
        }
        d
    };
    for l in (0..n_hidden).rev() {
        let (woff, rows, _cols) = map.layer_weights[l];
        let gw = delta.t().dot(&fb.acts[l]);
        for j in 0..gw.ncols() {
            for i in 0..rows {
                gs[woff + j * rows + i] += weight * gw[(i, j)];
            }
        }
        let (boff, _blen) = map.layer_biases[l];
        let gb = delta.sum_axis(Axis(0));
        for (k, v) in gb.iter().enumerate() {
            gs[boff + k] += weight * v;
        }
        if l > 0 {
            let w = map.weight_view(ts, l);
            let mut da = delta.dot(&w);
            let prev = &fb.acts[l];
            for (r, mut row) in da.rows_mut().into_iter().enumerate() {
                for (k, v) in row.iter_mut().enumerate() {
                    if prev[(r, k)] <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            delta = da;
        }
    }
}

/// ln(1 + e^x) without overflow.
pub fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-observation log density at a given linear predictor.
pub fn log_density_at_eta(family: Family, eta: f64, y: f64, log_dispersion: Option<f64>) -> f64 {
    match family {
        Family::Gaussian => {
            let ls = log_dispersion.unwrap_or(0.0);
            let r = y - eta;
            -0.5 * (LN_2PI + ls + r * r / ls.exp())
        }
        Family::Binomial => y * eta - ln_1p_exp(eta),
        Family::Poisson => y * eta - eta.exp() - ln_gamma(y + 1.0),
    }
}

/// Conditional mean E(y | eta).
pub fn mean_at_eta(family: Family, eta: f64) -> f64 {
    match family {
        Family::Gaussian => eta,
        Family::Binomial => sigmoid(eta),
        Family::Poisson => eta.exp(),
    }
}

/// d log p(y | eta) / d eta.
pub fn dll_deta(family: Family, eta: f64, y: f64, sigma2: f64) -> f64 {
    match family {
        Family::Gaussian => (y - eta) / sigma2,
        Family::Binomial => y - sigmoid(eta),
        Family::Poisson => y - eta.exp(),
    }
}

/// -d^2 log p(y | eta) / d eta^2 (the observation weight for canonical links).
pub fn obs_weight_eta(family: Family, eta: f64, sigma2: f64) -> f64 {
    match family {
        Family::Gaussian => 1.0 / sigma2,
        Family::Binomial => {
            let p = sigmoid(eta);
            p * (1.0 - p)
        }
        Family::Poisson => eta.exp(),
    }
}

fn check_support(family: Family, y: &ArrayView1<f64>) -> Result<()> {
    match family {
        Family::Gaussian => Ok(()),
        Family::Binomial => match y.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(i) => Err(Error::Data {
                line: Some(i),
                msg: format!("binomial response must be 0 or 1, got {}", y[i]),
            }),
        },
        Family::Poisson => match y.iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
            None => Ok(()),
            Some(i) => Err(Error::Data {
                line: Some(i),
                msg: format!("poisson response must be a nonnegative integer, got {}", y[i]),
            }),
        },
    }
}

/// Scaled batch log likelihood and its gradient in theta.
///
/// `scale` is n / batch size, making the result an unbiased estimate of the
/// full-data log likelihood.
pub fn loglik_and_grad(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    x: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    scale: f64,
) -> Result<(f64, Array1<f64>)> {
    check_support(spec.family, y)?;
    if x.nrows() != y.len() {
        return Err(Error::Dimension { what: "batch rows", expected: x.nrows(), got: y.len() });
    }
    let fb = forward_batch(spec, map, theta, x)?;
    let ts = theta.as_slice().expect("contiguous theta");

    let mut ll = 0.0;
    let mut deta = Array1::<f64>::zeros(y.len());
    let mut dlogdisp = 0.0;
    match spec.family {
        Family::Gaussian => {
            let ls = ts[map.log_dispersion.expect("gaussian has dispersion")];
            let s2 = ls.exp();
            for (r, (&yi, &ei)) in y.iter().zip(fb.eta.iter()).enumerate() {
                let res = yi - ei;
                ll += -0.5 * (LN_2PI + ls + res * res / s2);
                deta[r] = res / s2;
                dlogdisp += -0.5 + res * res / (2.0 * s2);
            }
        }
        Family::Binomial => {
            for (r, (&yi, &ei)) in y.iter().zip(fb.eta.iter()).enumerate() {
                ll += yi * ei - ln_1p_exp(ei);
                deta[r] = yi - sigmoid(ei);
            }
        }
        Family::Poisson => {
            for (r, (&yi, &ei)) in y.iter().zip(fb.eta.iter()).enumerate() {
                ll += yi * ei - ei.exp() - ln_gamma(yi + 1.0);
                deta[r] = yi - ei.exp();
            }
        }
    }

    let mut grad = Array1::<f64>::zeros(map.total);
    let out_w = ArrayView1::from(&ts[map.beta_tilde.clone()]);
    backprop_eta(spec, map, theta, &fb, &deta, &out_w, scale, &mut grad);
    if let Some(i) = map.log_dispersion {
        grad[i] += scale * dlogdisp;
    }
    Ok((scale * ll, grad))
}

/// Shrinkage hyperparameters: per-covariate group strengths and their
/// inverse-Gaussian variational factors, plus the global ridge strength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShrinkageState {
    pub gamma: Array1<f64>,
    /// Mean parameters of the inverse-Gaussian factors for 1/tau_j, which are
    /// also E[1/tau_j].
    pub alpha_tau: Array1<f64>,
    /// Shape parameters of the same factors.
    pub beta_tau: Array1<f64>,
    pub gamma_w: f64,
    /// Units in the first hidden layer (the m of the Gamma((m+1)/2, .) prior).
    pub m_first: usize,
}

impl ShrinkageState {
    pub fn init(n_groups: usize, m_first: usize) -> ShrinkageState {
        ShrinkageState {
            gamma: Array1::ones(n_groups),
            alpha_tau: Array1::ones(n_groups),
            beta_tau: Array1::ones(n_groups),
            gamma_w: 1.0,
            m_first,
        }
    }

    pub fn expected_tau(&self, j: usize) -> f64 {
        1.0 / self.alpha_tau[j] + 1.0 / self.beta_tau[j]
    }
}

/// One empirical-Bayes pass: refresh the inverse-Gaussian factors from the
/// current gamma, then gamma from the new factors, then the ridge strength.
/// E_q[w'w] over an index set is sum mu_i^2 + Sigma_ii.
pub fn update_shrinkage(
    fg: &FactorGaussian,
    map: &ParamIndexMap,
    shrink: &ShrinkageState,
) -> Result<ShrinkageState> {
    let sd = fg.sigma_diag();
    let mut out = shrink.clone();
    let m1 = (shrink.m_first + 1) as f64;
    for (j, group) in map.groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Config(format!("covariate group {j} is empty")));
        }
        let ew: f64 = group.clone().map(|i| fg.mu[i] * fg.mu[i] + sd[i]).sum();
        out.alpha_tau[j] = shrink.gamma[j] / ew.sqrt();
        out.beta_tau[j] = shrink.gamma[j] * shrink.gamma[j];
        out.gamma[j] = (m1 / (1.0 / out.alpha_tau[j] + 1.0 / out.beta_tau[j])).sqrt();
    }
    if !map.ridge.is_empty() {
        let ew: f64 = map.ridge.iter().map(|&i| fg.mu[i] * fg.mu[i] + sd[i]).sum();
        out.gamma_w = map.ridge.len() as f64 / ew;
    }
    Ok(out)
}

/// How the parameter prior is formed.
#[derive(Debug, Clone)]
pub enum PriorSpec {
    /// Improper flat prior: log p(theta) = 0.
    Flat,
    /// Group lasso on first-layer groups, ridge on the remaining weights,
    /// N(0, bias_var) on intercepts, flat on the log dispersion.
    Shrinkage { bias_var: f64 },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Shrinkage { bias_var: 100.0 }
    }
}

/// Gaussian-form log prior (up to theta-independent constants) and gradient.
/// The group contribution is -1/2 sum_j E[1/tau_j] |w_{X_j}|^2 with
/// E[1/tau_j] = alpha_tau_j.
pub fn log_prior_and_grad(
    map: &ParamIndexMap,
    theta: &Array1<f64>,
    shrink: &ShrinkageState,
    bias_var: f64,
) -> (f64, Array1<f64>) {
    let mut val = 0.0;
    let mut grad = Array1::<f64>::zeros(map.total);
    for (j, group) in map.groups.iter().enumerate() {
        let a = shrink.alpha_tau[j];
        for i in group.clone() {
            val -= 0.5 * a * theta[i] * theta[i];
            grad[i] -= a * theta[i];
        }
    }
    for &i in &map.ridge {
        val -= 0.5 * shrink.gamma_w * theta[i] * theta[i];
        grad[i] -= shrink.gamma_w * theta[i];
    }
    for &i in &map.biases {
        val -= 0.5 * theta[i] * theta[i] / bias_var;
        grad[i] -= theta[i] / bias_var;
    }
    (val, grad)
}

/// Uniform minibatch of `batch` distinct rows out of `n`.
pub fn sample_batch<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, batch).into_vec()
}

/// The h(theta) = log prior + log likelihood target for a DeepGLM, exposed to
/// the trainer as per-iteration callbacks over (mini)batches.
pub struct DeepGlmObjective {
    pub spec: NetworkSpec,
    pub map: ParamIndexMap,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub prior: PriorSpec,
    pub minibatch: Option<usize>,
    current: Vec<usize>,
}

impl DeepGlmObjective {
    pub fn new(
        spec: NetworkSpec,
        x: Array2<f64>,
        y: Array1<f64>,
        prior: PriorSpec,
        minibatch: Option<usize>,
    ) -> Result<DeepGlmObjective> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension { what: "rows", expected: x.nrows(), got: y.len() });
        }
        if x.nrows() == 0 {
            return Err(Error::Config("empty dataset".into()));
        }
        let map = ParamIndexMap::for_spec(&spec)?;
        let n = x.nrows();
        Ok(DeepGlmObjective { spec, map, x, y, prior, minibatch, current: (0..n).collect() })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    /// h and gradient over an explicit row set, scaled by n / |rows|.
    pub fn h_on_rows(
        &self,
        theta: &Array1<f64>,
        shrink: &ShrinkageState,
        rows: &[usize],
    ) -> Result<(f64, Array1<f64>)> {
        let (xb, yb);
        let (xv, yv) = if rows.len() == self.x.nrows() {
            (self.x.view(), self.y.view())
        } else {
            xb = self.x.select(Axis(0), rows);
            yb = self.y.select(Axis(0), rows);
            (xb.view(), yb.view())
        };
        let scale = self.x.nrows() as f64 / rows.len() as f64;
        let (mut h, mut grad) = loglik_and_grad(&self.spec, &self.map, theta, &xv, &yv, scale)?;
        if let PriorSpec::Shrinkage { bias_var } = self.prior {
            let (pv, pg) = log_prior_and_grad(&self.map, theta, shrink, bias_var);
            h += pv;
            grad += &pg;
        }
        Ok((h, grad))
    }

    /// Full-batch h, regardless of the minibatch setting.
    pub fn h_full(
        &self,
        theta: &Array1<f64>,
        shrink: &ShrinkageState,
    ) -> Result<(f64, Array1<f64>)> {
        let rows: Vec<usize> = (0..self.x.nrows()).collect();
        self.h_on_rows(theta, shrink, &rows)
    }
}

impl Objective for DeepGlmObjective {
    fn dim(&self) -> usize {
        self.map.total
    }

    fn param_map(&self) -> &ParamIndexMap {
        &self.map
    }

    fn initial_shrinkage(&self) -> ShrinkageState {
        ShrinkageState::init(self.map.groups.len(), self.spec.first_hidden())
    }

    fn begin_iteration(&mut self, _iteration: usize, rng: &mut ChaCha8Rng) {
        let n = self.x.nrows();
        self.current = match self.minibatch {
            Some(b) => sample_batch(n, b, rng),
            None => (0..n).collect(),
        };
    }

    fn h_and_grad(
        &mut self,
        theta: &Array1<f64>,
        shrink: &ShrinkageState,
    ) -> Result<(f64, Array1<f64>)> {
        let rows = std::mem::take(&mut self.current);
        let out = self.h_on_rows(theta, shrink, &rows);
        self.current = rows;
        out
    }
}

/// Glorot-style variational initialization: mu weight entries uniform in
/// +-sqrt(6/(fan_in+fan_out)), mu biases and transformed scales 0, loadings
/// N(0, 0.01^2) on the lower triangle, idiosyncratic scales 0.01.
pub fn init_variational(
    map: &ParamIndexMap,
    factors: usize,
    rng: &mut ChaCha8Rng,
) -> FactorGaussian {
    use rand_distr::{Normal, Uniform};
    let d = map.total;
    let mut mu = Array1::<f64>::zeros(d);
    for (range, bound) in &map.glorot {
        let u = Uniform::new(-bound, bound).expect("valid bound");
        for i in range.clone() {
            mu[i] = rng.sample(u);
        }
    }
    let norm = Normal::new(0.0, 0.01).unwrap();
    let mut b = Array2::<f64>::zeros((d, factors));
    for j in 0..factors {
        for i in j..d {
            b[(i, j)] = rng.sample(norm);
        }
    }
    let c = Array1::from_elem(d, 0.01);
    FactorGaussian { mu, b, c }
}

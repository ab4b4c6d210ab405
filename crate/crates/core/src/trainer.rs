//! Stochastic natural-gradient training loop.
//!
//! Each iteration estimates the lower-bound gradient by the reparametrization
//! trick, preconditions it with the inverse Fisher information (closed form
//! for one factor, conjugate gradients otherwise), applies a momentum moving
//! average and the fixed learning-rate schedule, then refreshes the shrinkage
//! hyperparameters. Training stops when the moving-average lower bound has
//! not improved for a patience window; the returned variational parameters
//! are the ones at the best smoothed lower bound.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::deepglm::{update_shrinkage, ParamIndexMap, ShrinkageState};
use crate::error::{Error, Result};
use crate::factor_gaussian::{estimate_lb_gradient, FactorGaussian};
use crate::natural_gradient::{natgrad_cg, natgrad_rank1, CGConfig};

/// A model exposing h(theta) = log p(theta) + log L(theta) to the trainer.
///
/// `begin_iteration` runs once per optimizer step before the gradient draws
/// (minibatch selection, per-iteration noise streams); the subsequent
/// `h_and_grad` calls within that iteration must be deterministic given that
/// setup, so that the S gradient samples share one batch.
pub trait Objective {
    fn dim(&self) -> usize;
    fn param_map(&self) -> &ParamIndexMap;
    fn initial_shrinkage(&self) -> ShrinkageState;
    fn begin_iteration(&mut self, iteration: usize, rng: &mut ChaCha8Rng);
    fn h_and_grad(
        &mut self,
        theta: &Array1<f64>,
        shrink: &ShrinkageState,
    ) -> Result<(f64, Array1<f64>)>;
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Base learning rate.
    pub eps0: f64,
    /// Iteration after which the rate decays as eps0 * tau / t.
    pub tau_threshold: usize,
    /// Momentum weight in [0, 1].
    pub momentum: f64,
    /// Monte Carlo samples per gradient estimate.
    pub samples: usize,
    /// Moving-average window for the lower bound.
    pub window_k: usize,
    /// Stop after this many iterations without smoothed-LB improvement.
    pub patience: usize,
    pub max_iter: usize,
    /// Number of covariance factors.
    pub factors: usize,
    /// Conjugate-gradient settings, used when factors > 1.
    pub cg: CGConfig,
    /// Step with the ordinary gradient instead of the natural one.
    pub natural: bool,
    /// Rescale the (natural) gradient to this l2 norm when it exceeds it.
    /// The Fisher operator is nearly singular in the loading block whenever B
    /// is small, so unclipped natural gradients can spike by orders of
    /// magnitude; near the optimum the clip is inactive.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eps0: 0.01,
            tau_threshold: 1000,
            momentum: 0.9,
            samples: 1,
            window_k: 50,
            patience: 500,
            max_iter: 5000,
            factors: 1,
            cg: CGConfig::default(),
            natural: true,
            clip_norm: Some(100.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps0 <= 0.0 {
            return Err(Error::Config("eps0 must be positive".into()));
        }
        if self.tau_threshold < 1 {
            return Err(Error::Config("tau threshold must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1]".into()));
        }
        if self.window_k < 1 || self.patience < 1 {
            return Err(Error::Config("window and patience must be >= 1".into()));
        }
        if self.samples < 1 {
            return Err(Error::Config("sample count must be >= 1".into()));
        }
        if self.factors < 1 {
            return Err(Error::Config("factor count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed schedule: eps0 up to the threshold, then eps0 * tau / t. The tail is
/// harmonic, so sum a_t diverges while sum a_t^2 converges.
pub fn learning_rate(t: usize, cfg: &TrainConfig) -> f64 {
    if t <= cfg.tau_threshold {
        cfg.eps0
    } else {
        cfg.eps0 * cfg.tau_threshold as f64 / t as f64
    }
}

/// One per-iteration trace row.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iteration: usize,
    pub lb: f64,
    /// Mean of the last K raw values; None before a full window exists.
    pub lb_smoothed: Option<f64>,
    pub step_size: f64,
    pub grad_norm: f64,
    pub natgrad_norm: f64,
    pub gamma: Vec<f64>,
    pub gamma_w: f64,
}

/// Receives trace rows as they are produced (file writers, progress displays).
pub trait TraceSink {
    fn record(&mut self, rec: &IterRecord);
}

/// Discards everything.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _rec: &IterRecord) {}
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<IterRecord>,
    pub best_smoothed: f64,
    pub best_iteration: usize,
    pub stopped_at: usize,
}

impl TrainTrace {
    pub fn raw_lb(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lb).collect()
    }
}

/// Improvements smaller than this do not reset the patience counter.
pub const IMPROVE_TOL: f64 = 1e-6;

/// Stopping rule on a raw lower-bound series: smooth over windows of K, stop
/// once the argmax is at least P iterations old. Iterations are 1-based;
/// the first smoothed value exists at iteration K.
pub fn smoothed_stop(raw_lb: &[f64], k: usize, p: usize) -> (bool, usize) {
    let t = raw_lb.len();
    if t < k {
        return (false, 0);
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_iter = 0;
    let mut window_sum: f64 = raw_lb[..k].iter().sum();
    for end in k..=t {
        let smoothed = window_sum / k as f64;
        if smoothed > best + IMPROVE_TOL {
            best = smoothed;
            best_iter = end;
        }
        if end < t {
            window_sum += raw_lb[end] - raw_lb[end - k];
        }
    }
    (t - best_iter >= p, best_iter)
}

/// Everything the training loop produces.
pub struct TrainOutcome {
    /// Variational parameters at the best smoothed lower bound.
    pub best: FactorGaussian,
    /// Parameters at the final iteration.
    pub last: FactorGaussian,
    pub shrink: ShrinkageState,
    pub trace: TrainTrace,
}

pub fn train<M: Objective, S: TraceSink>(
    model: &mut M,
    cfg: &TrainConfig,
    sink: &mut S,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map = model.param_map().clone();
    let mut fg = crate::deepglm::init_variational(&map, cfg.factors, &mut rng);
    let mut shrink = model.initial_shrinkage();
    let has_shrinkage = !map.groups.is_empty() || !map.ridge.is_empty();

    let mut momentum: Option<Array1<f64>> = None;
    let mut warm: Option<Array1<f64>> = None;
    let mut raw_lb: Vec<f64> = Vec::with_capacity(cfg.max_iter);
    let mut window_sum = 0.0;
    let mut best_smoothed = f64::NEG_INFINITY;
    let mut best_iteration = 0usize;
    let mut best_fg = fg.clone();
    let mut trace = TrainTrace::default();

    for t in 1..=cfg.max_iter {
        model.begin_iteration(t, &mut rng);
        let est = {
            let mut cb = |theta: &Array1<f64>| model.h_and_grad(theta, &shrink);
            estimate_lb_gradient(&fg, &mut cb, cfg.samples, &mut rng)?
        };
        let grad = est.flatten();
        let grad_norm = grad.dot(&grad).sqrt();

        let nat = if !cfg.natural {
            grad
        } else if cfg.factors == 1 {
            natgrad_rank1(&fg, &grad)?
        } else {
            let sol = natgrad_cg(&fg, &grad, &cfg.cg, warm.as_ref())?;
            warm = Some(sol.x.clone());
            sol.x
        };
        let mut nat = nat;
        if let Some(clip) = cfg.clip_norm {
            let norm = nat.dot(&nat).sqrt();
            if norm > clip {
                nat.mapv_inplace(|v| v * (clip / norm));
            }
        }
        let natgrad_norm = nat.dot(&nat).sqrt();

        let gbar = match momentum.take() {
            None => nat,
            Some(prev) => prev * cfg.momentum + &(nat * (1.0 - cfg.momentum)),
        };
        let step = learning_rate(t, cfg);

        let pre_step = fg.clone();
        let mut lambda = fg.pack();
        lambda.scaled_add(step, &gbar);
        momentum = Some(gbar);
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: t, grad_norm, natgrad_norm });
        }
        fg = FactorGaussian::from_packed(&lambda, map.total, cfg.factors)?;

        if has_shrinkage {
            shrink = update_shrinkage(&fg, &map, &shrink)?;
        }

        raw_lb.push(est.lb_value);
        window_sum += est.lb_value;
        if raw_lb.len() > cfg.window_k {
            window_sum -= raw_lb[raw_lb.len() - 1 - cfg.window_k];
        }
        let smoothed = if raw_lb.len() >= cfg.window_k {
            Some(window_sum / cfg.window_k as f64)
        } else {
            None
        };
        if let Some(s) = smoothed {
            if s > best_smoothed + IMPROVE_TOL {
                best_smoothed = s;
                best_iteration = t;
                best_fg = pre_step;
            }
        }

        let rec = IterRecord {
            iteration: t,
            lb: est.lb_value,
            lb_smoothed: smoothed,
            step_size: step,
            grad_norm,
            natgrad_norm,
            gamma: shrink.gamma.to_vec(),
            gamma_w: shrink.gamma_w,
        };
        sink.record(&rec);
        trace.records.push(rec);

        if best_iteration > 0 && t - best_iteration >= cfg.patience {
            break;
        }
    }

    let stopped_at = trace.records.len();
    trace.best_smoothed = best_smoothed;
    trace.best_iteration = best_iteration;
    trace.stopped_at = stopped_at;
    if best_iteration == 0 {
        best_fg = fg.clone();
    }
    Ok(TrainOutcome { best: best_fg, last: fg, shrink, trace })
}

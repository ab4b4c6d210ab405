//! Predictive evaluation: partial predictive score, MSE / misclassification,
//! and posterior-predictive draws with one-standard-deviation intervals for
//! the conditional mean.
//!
//! Metrics are always reported on the original response scale; when the
//! gaussian family was trained on a standardized response, the density and
//! squared errors are transformed back through the recorded scaling.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};

use crate::datagen::Standardization;
use crate::deepglm::{
    forward_batch, log_density_at_eta, mean_at_eta, Family, NetworkSpec, ParamIndexMap,
};
use crate::deepglmm::{laplace_mode, panel_design, PanelData, RandomEffects};
use crate::error::{Error, Result};

/// Classification rule shared by every binary prediction path: class 1 iff
/// the linear predictor is nonnegative.
pub fn classify(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyKind {
    Mse,
    Mcr,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PredictionRow {
    pub point: f64,
    pub predictive_mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PredictionReport {
    pub pps: f64,
    pub accuracy: f64,
    pub kind: AccuracyKind,
    pub rows: Vec<PredictionRow>,
}

fn y_scale(std: Option<&Standardization>) -> (f64, f64) {
    match std {
        Some(Standardization { y_mean: Some(m), y_sd: Some(s), .. }) => (*m, *s),
        _ => (0.0, 1.0),
    }
}

/// Mean negative log predictive density at a point estimate, original scale.
/// `x` and `y` are on the model (standardized) scale.
pub fn pps(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta_hat: &Array1<f64>,
    x: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    std: Option<&Standardization>,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let fb = forward_batch(spec, map, theta_hat, x)?;
    let log_disp = map.log_dispersion.map(|i| theta_hat[i]);
    let (_, y_sd) = y_scale(std);
    let mut total = 0.0;
    for (&yi, &ei) in y.iter().zip(fb.eta.iter()) {
        total += log_density_at_eta(spec.family, ei, yi, log_disp) - y_sd.ln();
    }
    Ok(-total / y.len() as f64)
}

/// MSE for continuous responses (original scale), misclassification rate for
/// binary ones.
pub fn accuracy(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta_hat: &Array1<f64>,
    x: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    std: Option<&Standardization>,
) -> Result<(f64, AccuracyKind)> {
    let fb = forward_batch(spec, map, theta_hat, x)?;
    let n = y.len() as f64;
    match spec.family {
        Family::Binomial => {
            let wrong = y
                .iter()
                .zip(fb.eta.iter())
                .filter(|(&yi, &ei)| classify(ei) != yi)
                .count();
            Ok((wrong as f64 / n, AccuracyKind::Mcr))
        }
        Family::Gaussian | Family::Poisson => {
            let (_, y_sd) = y_scale(std);
            let mse = y
                .iter()
                .zip(fb.eta.iter())
                .map(|(&yi, &ei)| {
                    let d = (yi - mean_at_eta(spec.family, ei)) * y_sd;
                    d * d
                })
                .sum::<f64>()
                / n;
            Ok((mse, AccuracyKind::Mse))
        }
    }
}

/// Laplace modes for every subject in `train`, keyed by subject label.
pub fn subject_modes(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta_hat: &Array1<f64>,
    re: RandomEffects,
    train: &PanelData,
) -> Result<std::collections::HashMap<String, Array1<f64>>> {
    let ts = theta_hat.as_slice().expect("contiguous theta");
    let gamma = Array1::from_iter(map.log_gamma.clone().map(|i| ts[i].exp()));
    let sigma2 = map.log_dispersion.map_or(1.0, |i| ts[i].exp());
    let mut modes = std::collections::HashMap::new();
    for panel in &train.panels {
        let design = panel_design(spec, map, theta_hat, re, &panel.x)?;
        let fit = laplace_mode(spec.family, &design, &panel.y.view(), &gamma, sigma2, None)?;
        modes.insert(panel.subject.clone(), fit.mode);
    }
    Ok(modes)
}

/// Per-subject plug-in predictions for panel data: the Laplace mode of each
/// subject's random effects, computed from its training rows at `theta_hat`,
/// perturbs the output weights. Returns (pps, accuracy, kind).
pub fn panel_metrics(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta_hat: &Array1<f64>,
    re: RandomEffects,
    train: &PanelData,
    test: &PanelData,
    std: Option<&Standardization>,
) -> Result<(f64, f64, AccuracyKind)> {
    let modes = subject_modes(spec, map, theta_hat, re, train)?;
    panel_metrics_with_modes(spec, map, theta_hat, re, &modes, test, std)
}

/// Metrics when per-subject modes are already available (from a model file).
/// Unseen subjects fall back to a zero random effect.
pub fn panel_metrics_with_modes(
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    theta_hat: &Array1<f64>,
    re: RandomEffects,
    modes: &std::collections::HashMap<String, Array1<f64>>,
    test: &PanelData,
    std: Option<&Standardization>,
) -> Result<(f64, f64, AccuracyKind)> {
    let ts = theta_hat.as_slice().expect("contiguous theta");
    let log_disp = map.log_dispersion.map(|i| ts[i]);
    let (_, y_sd) = y_scale(std);
    let zero_mode = Array1::<f64>::zeros(re.dim(spec));
    let mut total_lp = 0.0;
    let mut err = 0.0;
    let mut n = 0.0;
    for panel in &test.panels {
        let mode = modes.get(panel.subject.as_str()).unwrap_or(&zero_mode);
        let design = panel_design(spec, map, theta_hat, re, &panel.x)?;
        let eta = &design.base_eta + &design.z.dot(mode);
        for (&yi, &ei) in panel.y.iter().zip(eta.iter()) {
            total_lp += log_density_at_eta(spec.family, ei, yi, log_disp) - y_sd.ln();
            match spec.family {
                Family::Binomial => {
                    if classify(ei) != yi {
                        err += 1.0;
                    }
                }
                _ => {
                    let d = (yi - mean_at_eta(spec.family, ei)) * y_sd;
                    err += d * d;
                }
            }
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Err(Error::Config("empty panel test set".into()));
    }
    let kind =
        if spec.family == Family::Binomial { AccuracyKind::Mcr } else { AccuracyKind::Mse };
    Ok((-total_lp / n, err / n, kind))
}

/// Prediction rows for panel data. Parameter uncertainty comes from q draws;
/// the random effect stays plugged in at the stored subject mode (zero for
/// unseen subjects, reported through the returned flags).
#[allow(clippy::too_many_arguments)]
pub fn panel_prediction_report(
    fg: &crate::factor_gaussian::FactorGaussian,
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    re: RandomEffects,
    modes: &std::collections::HashMap<String, Array1<f64>>,
    x: &ArrayView2<f64>,
    subjects: &[String],
    n_draws: usize,
    std: Option<&Standardization>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<PredictionRow>, Vec<bool>)> {
    if n_draws < 2 {
        return Err(Error::Config("need at least 2 predictive draws".into()));
    }
    if subjects.len() != x.nrows() {
        return Err(Error::Dimension {
            what: "subject labels",
            expected: x.nrows(),
            got: subjects.len(),
        });
    }
    let (y_mean, y_sd) = y_scale(std);
    let zero_mode = Array1::<f64>::zeros(re.dim(spec));
    let d = fg.dim();
    let f = fg.factors();
    let mut rows = Vec::with_capacity(x.nrows());
    let mut fallback = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let mode = modes.get(subjects[i].as_str()).unwrap_or(&zero_mode);
        fallback.push(!modes.contains_key(subjects[i].as_str()));
        let xm = x.row(i).insert_axis(ndarray::Axis(0)).to_owned();
        let mut cond = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            let eps1 = Array1::from_iter((0..f).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let eps2 = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let theta = fg.sample_theta(&eps1, &eps2)?;
            let design = panel_design(spec, map, &theta, re, &xm)?;
            let eta = design.base_eta[0] + design.z.row(0).dot(mode);
            let m = match spec.family {
                Family::Gaussian => eta * y_sd + y_mean,
                other => mean_at_eta(other, eta),
            };
            cond.push(m);
        }
        let m = cond.iter().sum::<f64>() / n_draws as f64;
        let var = cond.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n_draws as f64 - 1.0);
        let sd = var.sqrt();
        // plug-in point prediction at the variational mean
        let design = panel_design(spec, map, &fg.mu, re, &xm)?;
        let eta_hat = design.base_eta[0] + design.z.row(0).dot(mode);
        let (point, probability) = match spec.family {
            Family::Binomial => (classify(eta_hat), Some(mean_at_eta(Family::Binomial, eta_hat))),
            Family::Gaussian => (eta_hat * y_sd + y_mean, None),
            Family::Poisson => (eta_hat.exp(), None),
        };
        rows.push(PredictionRow {
            point,
            predictive_mean: m,
            lower: m - sd,
            upper: m + sd,
            probability,
        });
    }
    Ok((rows, fallback))
}

/// Posterior-predictive draws for one covariate row.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    /// E(y | x, theta_m) per parameter draw, original scale.
    pub conditional_means: Vec<f64>,
    /// y draws from the full predictive distribution, original scale.
    pub y_draws: Vec<f64>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Samples theta from q, then y from p(y | x, theta). The interval is the
/// mean plus/minus one standard deviation of the drawn conditional means.
#[allow(clippy::too_many_arguments)]
pub fn predictive_draws(
    fg: &crate::factor_gaussian::FactorGaussian,
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    x: &ArrayView1<f64>,
    n_draws: usize,
    std: Option<&Standardization>,
    rng: &mut ChaCha8Rng,
) -> Result<PredictiveDraws> {
    if n_draws < 2 {
        return Err(Error::Config("need at least 2 predictive draws".into()));
    }
    let (y_mean, y_sd) = y_scale(std);
    let d = fg.dim();
    let f = fg.factors();
    let xm = x.view().insert_axis(ndarray::Axis(0)).to_owned();
    let mut cond = Vec::with_capacity(n_draws);
    let mut ys = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let eps1 = Array1::from_iter((0..f).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let eps2 = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let theta = fg.sample_theta(&eps1, &eps2)?;
        let fb = forward_batch(spec, map, &theta, &xm.view())?;
        let eta = fb.eta[0];
        match spec.family {
            Family::Gaussian => {
                let sigma = map
                    .log_dispersion
                    .map(|i| (theta[i] / 2.0).exp())
                    .unwrap_or(1.0);
                cond.push(eta * y_sd + y_mean);
                let noise: f64 = rng.sample(StandardNormal);
                ys.push((eta + sigma * noise) * y_sd + y_mean);
            }
            Family::Binomial => {
                let p = mean_at_eta(Family::Binomial, eta);
                cond.push(p);
                ys.push(f64::from(rng.random::<f64>() < p));
            }
            Family::Poisson => {
                let lam = eta.exp();
                cond.push(lam);
                let draw: f64 = rng.sample(Poisson::new(lam).map_err(|e| {
                    Error::Numerical(format!("poisson rate {lam}: {e}"))
                })?);
                ys.push(draw);
            }
        }
    }
    let m = cond.iter().sum::<f64>() / n_draws as f64;
    let var = cond.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n_draws as f64 - 1.0);
    let sd = var.sqrt();
    Ok(PredictiveDraws { conditional_means: cond, y_draws: ys, mean: m, lower: m - sd, upper: m + sd })
}

/// Builds the per-row report for a test matrix.
#[allow(clippy::too_many_arguments)]
pub fn prediction_report(
    fg: &crate::factor_gaussian::FactorGaussian,
    spec: &NetworkSpec,
    map: &ParamIndexMap,
    x: &ArrayView2<f64>,
    y: Option<&ArrayView1<f64>>,
    n_draws: usize,
    std: Option<&Standardization>,
    rng: &mut ChaCha8Rng,
) -> Result<PredictionReport> {
    let theta_hat = fg.mu.clone();
    let fb = forward_batch(spec, map, &theta_hat, x)?;
    let (_, y_sd) = y_scale(std);
    let mut rows = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let draws = predictive_draws(fg, spec, map, &x.row(i), n_draws, std, rng)?;
        let eta = fb.eta[i];
        let (point, probability) = match spec.family {
            Family::Binomial => (classify(eta), Some(mean_at_eta(Family::Binomial, eta))),
            Family::Gaussian => (eta * y_sd + y_scale(std).0, None),
            Family::Poisson => (eta.exp(), None),
        };
        rows.push(PredictionRow {
            point,
            predictive_mean: draws.mean,
            lower: draws.lower,
            upper: draws.upper,
            probability,
        });
    }
    let (pps_val, acc, kind) = match y {
        Some(yv) => {
            let p = pps(spec, map, &theta_hat, x, yv, std)?;
            let (a, k) = accuracy(spec, map, &theta_hat, x, yv, std)?;
            (p, a, k)
        }
        None => {
            let k = if spec.family == Family::Binomial {
                AccuracyKind::Mcr
            } else {
                AccuracyKind::Mse
            };
            (f64::NAN, f64::NAN, k)
        }
    };
    Ok(PredictionReport { pps: pps_val, accuracy: acc, kind, rows })
}

/// Groups a dataset's rows into per-subject panels, preserving row order.
pub fn panels_from_dataset(ds: &crate::datagen::Dataset) -> Result<PanelData> {
    let subjects = ds
        .subjects
        .as_ref()
        .ok_or_else(|| Error::Config("dataset has no subject column".into()))?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: std::collections::HashMap<String, Vec<usize>> = std::collections::HashMap::new();
    for (i, s) in subjects.iter().enumerate() {
        let e = rows.entry(s.clone()).or_insert_with(|| {
            order.push(s.clone());
            Vec::new()
        });
        e.push(i);
    }
    let mut panels = Vec::with_capacity(order.len());
    for s in order {
        let idx = &rows[&s];
        let x = ds.x.select(ndarray::Axis(0), idx);
        let y = ds.y.select(ndarray::Axis(0), idx);
        panels.push(crate::deepglmm::Panel { subject: s, x, y });
    }
    PanelData::new(panels)
}

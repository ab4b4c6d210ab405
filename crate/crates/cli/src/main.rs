//! Command-line front end: simulate datasets, train models, evaluate
//! predictive metrics, and emit per-row predictions with intervals.

mod model_file;
mod trace;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nagvac::datagen::{
    gen_binary_sim, gen_continuous_sim, gen_panel_sim, load_table, load_table_for_prediction,
    split_panel, split_random, write_table, Dataset,
};
use nagvac::deepglm::{DeepGlmObjective, Family, NetworkSpec, ParamIndexMap, PriorSpec};
use nagvac::deepglmm::{DeepGlmmObjective, RandomEffects};
use nagvac::evalpredict::{
    accuracy, panel_metrics_with_modes, panel_prediction_report, panels_from_dataset, pps,
    prediction_report, subject_modes, AccuracyKind,
};
use nagvac::natural_gradient::CGConfig;
use nagvac::trainer::{train, TrainConfig};

use model_file::{ModelFile, ModelKind, SCHEMA_VERSION};
use trace::CsvTraceSink;

#[derive(Parser)]
#[command(
    name = "nagvac",
    about = "Bayesian deep GLM/GLMM training by natural-gradient Gaussian variational \
             approximation with factor covariance",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write model, trace, and summary files.
    Train(Box<TrainArgs>),
    /// Per-row predictions with one-standard-deviation intervals.
    Predict(PredictArgs),
    /// Predictive metrics (PPS and MSE or MCR) on labeled data.
    Evaluate(EvaluateArgs),
    /// Generate one of the built-in simulation designs.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataSource {
    /// Comma-separated data file with a header row.
    #[arg(long, conflicts_with = "design")]
    data: Option<PathBuf>,
    /// Built-in simulation design instead of a file.
    #[arg(long, value_parser = ["binary", "continuous", "panel"])]
    design: Option<String>,
    /// Rows to simulate (binary and continuous designs).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Subjects to simulate (panel design).
    #[arg(long, default_value_t = 1000)]
    subjects: usize,
    /// Observations per subject (panel design).
    #[arg(long = "T", default_value_t = 20)]
    t_periods: usize,
    /// Response column name.
    #[arg(long, default_value = "y")]
    response: String,
    /// Subject id column name (switches to panel/mixed-model handling).
    #[arg(long)]
    subject: Option<String>,
}

impl DataSource {
    fn load(&self, seed: u64) -> anyhow::Result<Dataset> {
        match (&self.data, &self.design) {
            (Some(path), None) => {
                Ok(load_table(path, &self.response, self.subject.as_deref())?)
            }
            (None, Some(design)) => Ok(match design.as_str() {
                "binary" => gen_binary_sim(self.n, seed),
                "continuous" => gen_continuous_sim(self.n, seed),
                "panel" => gen_panel_sim(self.subjects, self.t_periods, seed),
                other => bail!("unknown design '{other}'"),
            }),
            _ => bail!("exactly one of --data or --design is required"),
        }
    }

    fn subject_column(&self, ds: &Dataset) -> Option<String> {
        if ds.subjects.is_some() {
            Some(self.subject.clone().unwrap_or_else(|| "subject".into()))
        } else {
            None
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: DataSource,
    /// Response family.
    #[arg(long, default_value = "binomial")]
    family: String,
    /// Full layer sizes including input and the final 1, e.g. 20,20,20,1.
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<usize>,
    /// Covariate indices (0-based, after any one-hot expansion) entering the
    /// linear predictor directly rather than through the network.
    #[arg(long = "linear-cols", value_delimiter = ',')]
    linear_cols: Vec<usize>,
    /// Covariance factors; 1 uses the closed-form natural gradient.
    #[arg(long, default_value_t = 1)]
    factors: usize,
    /// Monte Carlo samples per gradient estimate.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0.01)]
    eps0: f64,
    /// Iteration after which the learning rate decays as eps0*tau/t.
    #[arg(long, default_value_t = 1000)]
    tau: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Lower-bound moving-average window.
    #[arg(long, default_value_t = 50)]
    window: usize,
    /// Stop after this many iterations without smoothed-LB improvement.
    #[arg(long, default_value_t = 500)]
    patience: usize,
    #[arg(long = "max-iter", default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minibatch size (rows, or subjects for panel data); full batch if absent.
    #[arg(long)]
    batch: Option<usize>,
    /// Importance-sampling draws per subject per iteration (panel models).
    #[arg(long = "is-samples", default_value_t = 20)]
    is_samples: usize,
    /// Random-effect structure for panel models.
    #[arg(long = "re", default_value = "output", value_parser = ["output", "intercept"])]
    random_effects: String,
    /// Random train fraction; the held-out rows are written to test.csv.
    #[arg(long)]
    split: Option<f64>,
    /// Panel split: per-subject time-ordered training prefix length.
    #[arg(long = "train-t")]
    train_t: Option<usize>,
    /// Natural-gradient jitter (auto-scaled when absent).
    #[arg(long)]
    jitter: Option<f64>,
    /// Gradient clip norm; 0 disables clipping.
    #[arg(long, default_value_t = 100.0)]
    clip: f64,
    /// Step with the ordinary gradient instead of the natural gradient.
    #[arg(long = "ordinary-gradient", default_value_t = false)]
    ordinary_gradient: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Posterior-predictive draws per row.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = ["binary", "continuous", "panel"], required = true)]
    design: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    subjects: usize,
    #[arg(long = "T", default_value_t = 20)]
    t_periods: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(*args),
        Command::Predict(args) => run_predict(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nagvac: {e}");
            ExitCode::FAILURE
        }
    }
}

fn ensure_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn run_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    ensure_out(&args.out)?;
    let ds = match args.design.as_str() {
        "binary" => gen_binary_sim(args.n, args.seed),
        "continuous" => gen_continuous_sim(args.n, args.seed),
        "panel" => gen_panel_sim(args.subjects, args.t_periods, args.seed),
        other => bail!("unknown design '{other}'"),
    };
    let path = args.out.join("data.csv");
    write_table(&ds, &path)?;
    println!("wrote {} ({} rows)", path.display(), ds.n_rows());
    Ok(())
}

/// Reorders data columns by name to the model's training order.
fn align_columns(ds: &Dataset, want: &[String]) -> anyhow::Result<Array2<f64>> {
    if ds.columns == want {
        return Ok(ds.x.clone());
    }
    let mut idx = Vec::with_capacity(want.len());
    for name in want {
        match ds.columns.iter().position(|c| c == name) {
            Some(j) => idx.push(j),
            None => bail!(
                "schema mismatch: model needs column '{name}' which the data does not provide"
            ),
        }
    }
    Ok(ds.x.select(Axis(1), &idx))
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let t0 = std::time::Instant::now();
    ensure_out(&args.out)?;
    let family: Family = args.family.parse::<Family>().map_err(|e| anyhow::anyhow!("{e}"))?;
    let full = args.source.load(args.seed)?;
    let is_panel = full.subjects.is_some();

    let (mut train_ds, test_ds) = if let Some(t) = args.train_t {
        if !is_panel {
            bail!("--train-t requires panel data (a subject column)");
        }
        let (a, b) = split_panel(&full, t)?;
        (a, Some(b))
    } else if let Some(frac) = args.split {
        let (a, b) = split_random(&full, frac, args.seed)?;
        (a, Some(b))
    } else {
        (full, None)
    };

    if let Some(test) = &test_ds {
        write_table(&train_ds, &args.out.join("train.csv"))?;
        write_table(test, &args.out.join("test.csv"))?;
    }

    // standardize on training rows; gaussian responses are scaled too
    let standardize_y = family == Family::Gaussian;
    let record = train_ds.standardize(standardize_y);

    let p_full = train_ds.n_cols();
    if args.layers.is_empty() || args.layers[0] + args.linear_cols.len() != p_full {
        bail!(
            "layer sizes {:?} plus {} linear columns do not match the {} data covariates",
            args.layers,
            args.linear_cols.len(),
            p_full
        );
    }
    let mut spec = NetworkSpec::new(args.layers.clone(), family)?;
    if !args.linear_cols.is_empty() {
        spec = spec.with_linear_part(args.linear_cols.clone())?;
    }

    let cfg = TrainConfig {
        eps0: args.eps0,
        tau_threshold: args.tau,
        momentum: args.momentum,
        samples: args.samples,
        window_k: args.window,
        patience: args.patience,
        max_iter: args.max_iter,
        factors: args.factors,
        cg: CGConfig { jitter: args.jitter, ..CGConfig::default() },
        natural: !args.ordinary_gradient,
        clip_norm: if args.clip > 0.0 { Some(args.clip) } else { None },
        seed: args.seed,
    };
    echo_config(&args, &cfg, is_panel)?;

    let mut sink = CsvTraceSink::create(&args.out.join("trace.csv"))?;
    let re = match args.random_effects.as_str() {
        "intercept" => RandomEffects::InterceptOnly,
        _ => RandomEffects::OutputLayer,
    };

    let (outcome, mut model) = if is_panel {
        let panels = panels_from_dataset(&train_ds)?;
        let mut obj = DeepGlmmObjective::new(
            spec.clone(),
            panels,
            re,
            args.is_samples,
            PriorSpec::default(),
            args.seed,
        )?;
        obj.subject_batch = args.batch;
        let outcome = train(&mut obj, &cfg, &mut sink)?;
        let modes = subject_modes(&obj.spec, &obj.map, &outcome.best.mu, re, &obj.data)?;
        let panel_modes: BTreeMap<String, Vec<f64>> =
            modes.into_iter().map(|(k, v)| (k, v.to_vec())).collect();
        let model = ModelFile {
            schema_version: SCHEMA_VERSION,
            kind: ModelKind::Deepglmm,
            spec: obj.spec.clone(),
            factors: cfg.factors,
            mu: vec![],
            b_lower: vec![],
            c: vec![],
            shrinkage: outcome.shrink.clone(),
            standardization: record.clone(),
            columns: train_ds.columns.clone(),
            response: train_ds.response.clone(),
            subject: args.source.subject_column(&train_ds),
            random_effects: Some(re),
            panel_modes,
            train_seed: args.seed,
        };
        (outcome, model)
    } else {
        let mut obj = DeepGlmObjective::new(
            spec.clone(),
            train_ds.x.clone(),
            train_ds.y.clone(),
            PriorSpec::default(),
            args.batch,
        )?;
        let outcome = train(&mut obj, &cfg, &mut sink)?;
        let model = ModelFile {
            schema_version: SCHEMA_VERSION,
            kind: ModelKind::Deepglm,
            spec: obj.spec.clone(),
            factors: cfg.factors,
            mu: vec![],
            b_lower: vec![],
            c: vec![],
            shrinkage: outcome.shrink.clone(),
            standardization: record.clone(),
            columns: train_ds.columns.clone(),
            response: train_ds.response.clone(),
            subject: None,
            random_effects: None,
            panel_modes: BTreeMap::new(),
            train_seed: args.seed,
        };
        (outcome, model)
    };

    model.set_factor_gaussian(&outcome.best);
    model.save(&args.out.join("model.json"))?;

    let summary = serde_json::json!({
        "best_smoothed_lb": outcome.trace.best_smoothed,
        "best_iteration": outcome.trace.best_iteration,
        "stopped_at": outcome.trace.stopped_at,
        "n_train": train_ds.n_rows(),
        "n_test": test_ds.as_ref().map_or(0, |d| d.n_rows()),
        "parameters": outcome.best.dim(),
        "elapsed_seconds": t0.elapsed().as_secs_f64(),
    });
    std::fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} parameters, best smoothed LB {:.4} at iteration {} (stopped at {})",
        outcome.best.dim(),
        outcome.trace.best_smoothed,
        outcome.trace.best_iteration,
        outcome.trace.stopped_at
    );
    Ok(())
}

fn echo_config(args: &TrainArgs, cfg: &TrainConfig, is_panel: bool) -> anyhow::Result<()> {
    let echo = serde_json::json!({
        "command": "train",
        "data": args.source.data.as_ref().map(|p| p.display().to_string()),
        "design": args.source.design,
        "n": args.source.n,
        "subjects": args.source.subjects,
        "T": args.source.t_periods,
        "response": args.source.response,
        "subject": args.source.subject,
        "panel": is_panel,
        "family": args.family,
        "layers": args.layers,
        "linear_cols": args.linear_cols,
        "factors": cfg.factors,
        "samples": cfg.samples,
        "eps0": cfg.eps0,
        "tau": cfg.tau_threshold,
        "momentum": cfg.momentum,
        "window": cfg.window_k,
        "patience": cfg.patience,
        "max_iter": cfg.max_iter,
        "seed": cfg.seed,
        "batch": args.batch,
        "is_samples": args.is_samples,
        "random_effects": args.random_effects,
        "split": args.split,
        "train_t": args.train_t,
        "jitter": args.jitter,
        "clip": args.clip,
        "natural_gradient": cfg.natural,
        "out": args.out.display().to_string(),
    });
    std::fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
    Ok(())
}

fn load_for_model(
    model: &ModelFile,
    path: &Path,
    need_response: bool,
) -> anyhow::Result<(Dataset, bool)> {
    let subject = model.subject.as_deref();
    let (mut ds, has_response) = if need_response {
        (load_table(path, &model.response, subject)?, true)
    } else {
        load_table_for_prediction(path, &model.response, subject)?
    };
    if model.kind == ModelKind::Deepglmm && ds.subjects.is_none() {
        bail!("schema mismatch: panel model requires the subject column {:?}", model.subject);
    }
    ds.x = align_columns(&ds, &model.columns)?;
    ds.columns = model.columns.clone();
    // standardize with the training statistics; skip y when unlabeled
    let mut record = model.standardization.clone();
    if !has_response {
        record.y_mean = None;
        record.y_sd = None;
    }
    ds.apply_standardization(&record)?;
    Ok((ds, has_response))
}

fn run_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    ensure_out(&args.out)?;
    let model = ModelFile::load(&args.model)?;
    let (ds, _) = load_for_model(&model, &args.data, true)?;
    let fg = model.factor_gaussian()?;
    let std = Some(&model.standardization);

    let (pps_val, acc_val, kind) = match model.kind {
        ModelKind::Deepglm => {
            let map = ParamIndexMap::for_spec(&model.spec)?;
            let p = pps(&model.spec, &map, &fg.mu, &ds.x.view(), &ds.y.view(), std)?;
            let (a, k) = accuracy(&model.spec, &map, &fg.mu, &ds.x.view(), &ds.y.view(), std)?;
            (p, a, k)
        }
        ModelKind::Deepglmm => {
            let re = model.random_effects.unwrap_or(RandomEffects::OutputLayer);
            let map = ParamIndexMap::for_mixed_spec(&model.spec, re.dim(&model.spec))?;
            let panels = panels_from_dataset(&ds)?;
            let modes: std::collections::HashMap<String, Array1<f64>> = model
                .panel_modes
                .iter()
                .map(|(k, v)| (k.clone(), Array1::from_vec(v.clone())))
                .collect();
            panel_metrics_with_modes(&model.spec, &map, &fg.mu, re, &modes, &panels, std)?
        }
    };

    let kind_name = match kind {
        AccuracyKind::Mse => "mse",
        AccuracyKind::Mcr => "mcr",
    };
    let metrics = serde_json::json!({
        "pps": pps_val,
        kind_name: acc_val,
        "n_test": ds.n_rows(),
    });
    std::fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    println!("pps = {pps_val} | {kind_name} = {acc_val}");
    Ok(())
}

fn run_predict(args: PredictArgs) -> anyhow::Result<()> {
    ensure_out(&args.out)?;
    let model = ModelFile::load(&args.model)?;
    let (ds, has_response) = load_for_model(&model, &args.data, false)?;
    let fg = model.factor_gaussian()?;
    let std = Some(&model.standardization);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let rows = match model.kind {
        ModelKind::Deepglm => {
            let map = ParamIndexMap::for_spec(&model.spec)?;
            let y_view = ds.y.view();
            let report = prediction_report(
                &fg,
                &model.spec,
                &map,
                &ds.x.view(),
                if has_response { Some(&y_view) } else { None },
                args.draws,
                std,
                &mut rng,
            )?;
            report.rows
        }
        ModelKind::Deepglmm => {
            let re = model.random_effects.unwrap_or(RandomEffects::OutputLayer);
            let map = ParamIndexMap::for_mixed_spec(&model.spec, re.dim(&model.spec))?;
            let modes: std::collections::HashMap<String, Array1<f64>> = model
                .panel_modes
                .iter()
                .map(|(k, v)| (k.clone(), Array1::from_vec(v.clone())))
                .collect();
            let subjects = ds.subjects.clone().unwrap_or_default();
            let (rows, fallback) = panel_prediction_report(
                &fg,
                &model.spec,
                &map,
                re,
                &modes,
                &ds.x.view(),
                &subjects,
                args.draws,
                std,
                &mut rng,
            )?;
            let n_unseen = fallback.iter().filter(|f| **f).count();
            if n_unseen > 0 {
                eprintln!(
                    "nagvac: warning: {n_unseen} rows belong to subjects unseen in training; \
                     used a zero random effect"
                );
            }
            rows
        }
    };

    let path = args.out.join("predictions.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    use std::io::Write;
    writeln!(out, "row,point,predictive_mean,lower,upper,probability")?;
    for (i, r) in rows.iter().enumerate() {
        let prob = r.probability.map_or(String::new(), |p| format!("{p}"));
        writeln!(out, "{},{},{},{},{},{}", i, r.point, r.predictive_mean, r.lower, r.upper, prob)?;
    }
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

use nagvac::trainer::*;
use nagvac::natural_gradient::CGConfig;
use ndarray::{Array1, Array2, array};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[allow(unused_imports)]
use nagvac::deepglm::{ParamIndexMap, ShrinkageState, NetworkSpec, Family};

const LN_2PI: f64 = 1.8378770664093453;

struct Conj { x: Array2<f64>, y: Array1<f64>, sigma2: f64, tau2: f64, map: ParamIndexMap }
impl Conj {
    fn new(n: usize, seed: u64) -> Conj {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n,3), |_| rng.sample::<f64,_>(StandardNormal));
        let beta = array![0.8,-0.5,0.3];
        let y = x.dot(&beta) + Array1::from_iter((0..n).map(|_| rng.sample::<f64,_>(StandardNormal)*0.7));
        let spec = NetworkSpec::new(vec![2,1], Family::Binomial).unwrap();
        let mut map = ParamIndexMap::for_spec(&spec).unwrap();
        map.total = 3; map.groups.clear(); map.ridge.clear(); map.biases.clear();
        map.glorot = vec![(0..3, 0.8)]; map.log_dispersion = None;
        Conj { x, y, sigma2: 0.49, tau2: 4.0, map }
    }
}
impl Objective for Conj {
    fn dim(&self) -> usize { 3 }
    fn param_map(&self) -> &ParamIndexMap { &self.map }
    fn initial_shrinkage(&self) -> ShrinkageState { ShrinkageState::init(0,0) }
    fn begin_iteration(&mut self, _t: usize, _r: &mut ChaCha8Rng) {}
    fn h_and_grad(&mut self, theta: &Array1<f64>, _s: &ShrinkageState) -> nagvac::Result<(f64, Array1<f64>)> {
        let r = &self.y - &self.x.dot(theta);
        let n = self.y.len() as f64;
        let ll = -0.5*(n*(LN_2PI + self.sigma2.ln()) + r.dot(&r)/self.sigma2);
        let lp = -0.5*(3.0*(LN_2PI + self.tau2.ln()) + theta.dot(theta)/self.tau2);
        let grad = &self.x.t().dot(&r)/self.sigma2 - &(theta/self.tau2);
        Ok((ll+lp, grad))
    }
}

struct PrintSink;
impl TraceSink for PrintSink {
    fn record(&mut self, r: &IterRecord) {
        if r.iteration <= 60 || r.iteration % 100 == 0 {
            println!("t={:4} lb={:10.3} |g|={:9.2e} |nat|={:9.2e} a={:.4}", r.iteration, r.lb, r.grad_norm, r.natgrad_norm, r.step_size);
        }
    }
}

fn main() {
    let ev_model = Conj::new(20, 5);
    {
        use nagvac::linalg;
        let n = ev_model.y.len();
        let mut s = Array2::<f64>::eye(n) * ev_model.sigma2;
        s += &(ev_model.x.dot(&ev_model.x.t()) * ev_model.tau2);
        let chol = linalg::cholesky(&s).unwrap();
        let quad = ev_model.y.dot(&linalg::cholesky_solve(&chol, &ev_model.y));
        let ev = -0.5 * (n as f64 * LN_2PI + linalg::cholesky_log_det(&chol) + quad);
        println!("evidence = {ev:.4}");
    }
    for (eps0, jit, clip, s_count, maxit) in [
        (0.02, Some(0.1), Some(10.0), 1usize, 15000usize),
        (0.02, Some(0.1), Some(10.0), 1, 20000),
    ] {
        let mut m = Conj::new(20, 5);
        let cfg = TrainConfig { eps0, max_iter: maxit, patience: maxit, factors: 3, samples: s_count, window_k: 300,
            cg: CGConfig { jitter: jit, ..CGConfig::default() }, clip_norm: clip, seed: 11, ..TrainConfig::default() };
        match train(&mut m, &cfg, &mut NullSink) {
            Ok(out) => {
                let tail: Vec<f64> = out.trace.raw_lb().iter().rev().take(200).cloned().collect();
                let mean = tail.iter().sum::<f64>() / tail.len() as f64;
                // posterior mean
                use nagvac::linalg;
                let mut a = m.x.t().dot(&m.x) / m.sigma2;
                for i in 0..3 { a[(i,i)] += 1.0 / m.tau2; }
                let chol = linalg::cholesky(&a).unwrap();
                let cov = linalg::cholesky_inverse(&chol);
                let pmean = cov.dot(&m.x.t().dot(&m.y)) / m.sigma2;
                // fresh big-S LB estimate at best lambda
                let mut rng2 = ChaCha8Rng::seed_from_u64(777);
                let mut vals = Vec::new();
                for _ in 0..400 {
                    let mut cb = |theta: &Array1<f64>| m.h_and_grad(theta, &ShrinkageState::init(0,0));
                    let est = nagvac::factor_gaussian::estimate_lb_gradient(&out.best, &mut cb, 1, &mut rng2).unwrap();
                    vals.push(est.lb_value);
                }
                let lbm = vals.iter().sum::<f64>() / vals.len() as f64;
                let lbv = vals.iter().map(|v| (v-lbm).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0);
                let se = (lbv / vals.len() as f64).sqrt();
                println!("eps0={eps0} jit={jit:?} clip={clip:?} s={s_count} -> best {:.3} at {} tail200 {:.3}",
                    out.trace.best_smoothed, out.trace.best_iteration, mean);
                println!("   fresh LB at best: {lbm:.4} +- {se:.4}  | mu diff {:?}",
                    (0..3).map(|i| format!("{:.4}", (out.best.mu[i]-pmean[i]).abs())).collect::<Vec<_>>());
                let final_smoothed = out.trace.records.last().unwrap().lb_smoothed.unwrap();
                let raw = out.trace.raw_lb();
                let t1000 = &raw[raw.len()-1000..];
                let tm = t1000.iter().sum::<f64>()/1000.0;
                let tv = t1000.iter().map(|v| (v-tm).powi(2)).sum::<f64>()/999.0;
                let se_win = (tv/300.0f64).sqrt();
                let ev = -26.66286817342968f64;
                let max_excess = out.trace.records.iter().filter_map(|r| r.lb_smoothed).map(|s| s-ev).fold(f64::NEG_INFINITY, f64::max);
                println!("   final smoothed {final_smoothed:.4} (diff {:.4}); window SE {se_win:.4}; max excess {max_excess:.4} = {:.2} SE", (final_smoothed-ev).abs(), max_excess/se_win);
            }
            Err(e) => println!("eps0={eps0} jit={jit:?} clip={clip:?} s={s_count} ERR {e}"),
        }
    }
}

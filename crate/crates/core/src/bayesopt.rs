//! Bayesian optimisation of 1D GP-prior functions with expected improvement.
//!
//! Objectives are realized on a fixed 1000-point grid over `[-2, 2]`,
//! normalized to zero mean and unit range, and minimized. The acquisition is
//! maximized exhaustively over the grid points not yet queried.

use nalgebra::DVector;
use rand::Rng;
use statrs::function::erf::erfc;

use crate::bootstrap::{predict_with, EnsemblePrediction, Randomness, VariantFlags};
use crate::error::{Error, Result};
use crate::fmt::sig6;
use crate::npmodels::Model;
use crate::rng;
use crate::taskgen::{
    apply_t_noise, jittered_cholesky, kernel_eval, kernel_matrix, sample_gp, KernelFamily, KernelSpec, NoiseKind, Task,
    TaskDist, X_MAX, X_MIN,
};

pub const GRID_SIZE: usize = 1000;
pub const TRACE_HEADER: &str = "function_id,iter,x,y,best,simple_regret,cum_regret";
/// Query points per surrogate forward pass.
const CHUNK: usize = 250;

pub fn grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| X_MIN + (X_MAX - X_MIN) * i as f64 / (n - 1) as f64)
        .collect()
}

/// A realized, normalized objective on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub opt_index: usize,
}

impl Objective {
    /// Shifts and scales `y` to zero mean and unit range.
    pub fn from_values(name: &str, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Shape(format!("{} inputs, {} values", x.len(), y.len())));
        }
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let (lo, hi) = y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        let y: Vec<f64> = if range > 0.0 {
            y.iter().map(|v| (v - mean) / range).collect()
        } else {
            vec![0.0; y.len()]
        };
        let opt_index = argmin(&y);
        Ok(Self {
            name: name.into(),
            x,
            y,
            opt_index,
        })
    }

    /// Function `function_id` of the named family (`rbf`, `matern`,
    /// `periodic`, `rbf-tnoise`).
    pub fn sample(name: &str, seed: u64, function_id: u64) -> Result<Self> {
        let dist = TaskDist::named(name)?;
        let mut r = rng::stream(seed, "bo-objective", function_id);
        let kernel = dist.prior.sample(&mut r);
        let x = grid(GRID_SIZE);
        let f = sample_gp(&mut r, &kernel, &x, 0.0)?;
        let f = if dist.noise.kind == NoiseKind::StudentT {
            let t = Task::new(x.clone(), f, vec![0])?;
            apply_t_noise(t, &mut r, (0.0, dist.noise.t_gamma_max), dist.noise.t_dof).y
        } else {
            f
        };
        Self::from_values(name, x, f)
    }

    pub fn optimum(&self) -> f64 {
        self.y[self.opt_index]
    }
}

fn argmin(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x < v[b] { i } else { b })
}

/// GP posterior mean and variance at `xs` given noisy observations.
pub fn gp_posterior(
    kernel: &KernelSpec,
    obs_x: &[f64],
    obs_y: &[f64],
    xs: &[f64],
    noise_var: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    kernel.validate()?;
    if obs_x.len() != obs_y.len() {
        return Err(Error::Shape(format!("{} inputs, {} outputs", obs_x.len(), obs_y.len())));
    }
    let prior: Vec<f64> = xs.iter().map(|&x| kernel_eval(kernel, x, x)).collect();
    if obs_x.is_empty() {
        return Ok((vec![0.0; xs.len()], prior));
    }
    let k = kernel_matrix(kernel, obs_x, obs_x);
    let chol = jittered_cholesky(&k, noise_var, kernel.variance())?;
    let alpha = chol.solve(&DVector::from_column_slice(obs_y));
    let ks = kernel_matrix(kernel, obs_x, xs);
    let mean = ks.transpose() * &alpha;
    let v = chol
        .l()
        .solve_lower_triangular(&ks)
        .ok_or(Error::Cholesky { jitter: 0.0 })?;
    let var = prior
        .iter()
        .enumerate()
        .map(|(j, p)| (p - v.column(j).norm_squared()).max(0.0))
        .collect();
    Ok((mean.iter().copied().collect(), var))
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement below `best` of `N(μ, σ²)`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let gain = best - mu;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

#[derive(Clone, Debug)]
pub enum Surrogate<'a> {
    /// GP with fixed hyperparameters and noise-free observations.
    GpOracle(KernelSpec),
    /// A neural-process model; ensemble predictions are moment-matched.
    Model {
        model: &'a Model,
        k: usize,
        flags: VariantFlags,
    },
    /// Uniformly random unqueried grid point.
    Random,
}

impl Surrogate<'_> {
    /// GP oracle over the given family with `s = 1`, `ℓ = 0.4`.
    pub fn oracle(family: KernelFamily) -> Self {
        let spec = match family {
            KernelFamily::Rbf => KernelSpec::rbf(1.0, 0.4),
            KernelFamily::Matern52 => KernelSpec::matern52(1.0, 0.4),
            KernelFamily::Periodic => KernelSpec::periodic(1.0, 0.4, 0.3),
        };
        Surrogate::GpOracle(spec)
    }

    pub fn label(&self) -> String {
        match self {
            Surrogate::GpOracle(_) => "gp-oracle".into(),
            Surrogate::Model { model, flags, .. } => crate::evalsuite::model_label(model, *flags),
            Surrogate::Random => "random".into(),
        }
    }

    /// Predictive mean and standard deviation at `xs`.
    pub fn predict(
        &self,
        obs_x: &[f64],
        obs_y: &[f64],
        xs: &[f64],
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Surrogate::GpOracle(k) => {
                let (m, v) = gp_posterior(k, obs_x, obs_y, xs, 0.0)?;
                Ok((m, v.into_iter().map(f64::sqrt).collect()))
            }
            Surrogate::Model { model, k, flags } => {
                let randomness = Randomness::sample(model, *flags, obs_x.len(), *k, rng)?;
                let mut parts = Vec::with_capacity(xs.len().div_ceil(CHUNK));
                for chunk in xs.chunks(CHUNK) {
                    parts.push(predict_with(model, obs_x, obs_y, chunk, &randomness, *flags)?);
                }
                Ok(EnsemblePrediction::concat(&parts)?.moments())
            }
            Surrogate::Random => Err(Error::Contract("random search has no predictive".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub x: f64,
    pub y: f64,
    pub best: f64,
    pub simple_regret: f64,
    pub cum_regret: f64,
}

/// One optimisation run; the first rows are the initial design.
#[derive(Clone, Debug, PartialEq)]
pub struct BOTrace {
    pub function_id: u64,
    pub surrogate: String,
    pub rows: Vec<TraceRow>,
}

impl BOTrace {
    pub fn final_regret(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.simple_regret)
    }

    pub fn final_cum_regret(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.cum_regret)
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.function_id,
                r.iter,
                sig6(r.x),
                sig6(r.y),
                sig6(r.best),
                sig6(r.simple_regret),
                sig6(r.cum_regret)
            ));
        }
        s
    }

    /// Simple regret never increases and cumulative regret is its running sum.
    pub fn check_invariants(&self) -> Result<()> {
        let mut cum = 0.0;
        for w in self.rows.windows(2) {
            if w[1].simple_regret > w[0].simple_regret {
                return Err(Error::Contract(format!(
                    "simple regret increased at iter {}",
                    w[1].iter
                )));
            }
        }
        for r in &self.rows {
            cum += r.simple_regret;
            if r.simple_regret < 0.0 || (r.cum_regret - cum).abs() > 1e-9 * cum.max(1.0) {
                return Err(Error::Contract(format!("regret bookkeeping broken at iter {}", r.iter)));
            }
        }
        Ok(())
    }
}

/// Initial design shared by every surrogate for a given `(seed, function_id)`.
pub fn initial_design(n_grid: usize, init_points: usize, seed: u64, function_id: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, "bo-init", function_id);
    let mut out = Vec::with_capacity(init_points);
    while out.len() < init_points.min(n_grid) {
        let i = r.random_range(0..n_grid);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Runs `iters` acquisition steps after the initial design. On a surrogate
/// failure the trace up to that point is returned alongside the error.
pub fn bo_run_partial(
    surrogate: &Surrogate<'_>,
    objective: &Objective,
    iters: usize,
    init_points: usize,
    seed: u64,
    function_id: u64,
) -> (BOTrace, Result<()>) {
    let mut trace = BOTrace {
        function_id,
        surrogate: surrogate.label(),
        rows: vec![],
    };
    if init_points == 0 || iters == 0 {
        return (
            trace,
            Err(Error::Config("BO needs iters >= 1 and init_points >= 1".into())),
        );
    }
    let n = objective.x.len();
    let f_min = objective.optimum();
    let (mut ox, mut oy) = (vec![], vec![]);
    let mut best = f64::INFINITY;
    let mut cum = 0.0;
    let mut observe = |i: usize, trace: &mut BOTrace, ox: &mut Vec<f64>, oy: &mut Vec<f64>| {
        let (x, y) = (objective.x[i], objective.y[i]);
        ox.push(x);
        oy.push(y);
        best = best.min(y);
        let simple_regret = best - f_min;
        cum += simple_regret;
        trace.rows.push(TraceRow {
            iter: trace.rows.len(),
            x,
            y,
            best,
            simple_regret,
            cum_regret: cum,
        });
    };
    for i in initial_design(n, init_points, seed, function_id) {
        observe(i, &mut trace, &mut ox, &mut oy);
    }
    for it in 0..iters {
        let mut r = rng::stream(seed, "bo-step", (function_id << 20) | it as u64);
        let free: Vec<usize> = (0..n)
            .filter(|&i| !trace.rows.iter().any(|row| row.x == objective.x[i]))
            .collect();
        if free.is_empty() {
            break;
        }
        let next = match surrogate {
            Surrogate::Random => free[r.random_range(0..free.len())],
            _ => {
                let xs: Vec<f64> = free.iter().map(|&i| objective.x[i]).collect();
                let (mu, sd) = match surrogate.predict(&ox, &oy, &xs, &mut r) {
                    Ok(p) => p,
                    Err(e) => return (trace, Err(e)),
                };
                let cur = *oy.iter().min_by(|a, b| a.total_cmp(b)).expect("observations");
                let ei: Vec<f64> = mu
                    .iter()
                    .zip(&sd)
                    .map(|(&m, &s)| expected_improvement(m, s, cur))
                    .collect();
                let pick = ei
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > ei[b] { i } else { b });
                free[pick]
            }
        };
        observe(next, &mut trace, &mut ox, &mut oy);
    }
    (trace, Ok(()))
}

pub fn bo_run(
    surrogate: &Surrogate<'_>,
    objective: &Objective,
    iters: usize,
    init_points: usize,
    seed: u64,
    function_id: u64,
) -> Result<BOTrace> {
    let (trace, res) = bo_run_partial(surrogate, objective, iters, init_points, seed, function_id);
    res.map(|_| trace)
}

/// Runs one surrogate over functions `0..functions` of an objective family.
pub fn bo_benchmark(
    surrogate: &Surrogate<'_>,
    family: &str,
    functions: usize,
    iters: usize,
    init_points: usize,
    seed: u64,
) -> Result<Vec<BOTrace>> {
    (0..functions as u64)
        .map(|f| {
            let obj = Objective::sample(family, seed, f)?;
            bo_run(surrogate, &obj, iters, init_points, seed, f)
        })
        .collect()
}

pub fn mean_final_regret(traces: &[BOTrace]) -> f64 {
    traces.iter().map(BOTrace::final_regret).sum::<f64>() / traces.len() as f64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn ei_reference_values() {
        assert_eq!(expected_improvement(0.3, 0.0, 0.3), 0.0);
        assert_eq!(expected_improvement(0.1, 0.0, 0.3), 0.3 - 0.1);
        assert!((expected_improvement(0.0, 1.0, 0.0) - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn empty_posterior_is_prior() {
        let k = KernelSpec::rbf(0.7, 0.4);
        let (m, v) = gp_posterior(&k, &[], &[], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
        assert!((v[0] - 0.49).abs() < 1e-15);
    }

    #[test]
    fn posterior_interpolates_observations() {
        let k = KernelSpec::rbf(1.0, 0.4);
        let (m, v) = gp_posterior(&k, &[-1.0, 0.5], &[0.3, -0.2], &[0.5], 0.0).unwrap();
        assert!((m[0] + 0.2).abs() < 1e-4);
        assert!(v[0] < 1e-5);
    }

    #[test]
    fn normalization_gives_unit_range() {
        let o = Objective::sample("rbf", 3, 0).unwrap();
        let (lo, hi) =
            o.y.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((hi - lo - 1.0).abs() < 1e-12);
        assert!(o.y.iter().sum::<f64>().abs() < 1e-9);
        assert_eq!(o.optimum(), lo);
    }

    #[test]
    fn constant_objective_has_zero_regret() {
        let x = grid(50);
        let o = Objective::from_values("flat", x, vec![2.0; 50]).unwrap();
        let t = bo_run(&Surrogate::oracle(KernelFamily::Rbf), &o, 3, 1, 0, 0).unwrap();
        assert!(t.rows.iter().all(|r| r.simple_regret == 0.0));
    }

    #[test]
    fn trace_length_is_init_plus_iters() {
        let o = Objective::sample("rbf", 1, 2).unwrap();
        for init in [1, 3] {
            let t = bo_run(&Surrogate::Random, &o, 1, init, 5, 2).unwrap();
            assert_eq!(t.rows.len(), init + 1);
            t.check_invariants().unwrap();
        }
    }

    #[test]
    fn initial_design_is_shared() {
        let o = Objective::sample("rbf", 4, 1).unwrap();
        let a = bo_run(&Surrogate::Random, &o, 2, 2, 4, 1).unwrap();
        let b = bo_run(&Surrogate::oracle(KernelFamily::Rbf), &o, 2, 2, 4, 1).unwrap();
        assert_eq!(a.rows[..2], b.rows[..2]);
    }

    #[test]
    fn random_moments_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (k, n) = (5, 3);
        let mu: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..k * n).map(|_| rng.random_range(0.1..1.0)).collect();
        let p = EnsemblePrediction::new(k, n, mu.clone(), sigma.clone()).unwrap();
        let (m, s) = p.moments();
        for i in 0..n {
            let comps: Vec<(f64, f64)> = (0..k).map(|j| (mu[j * n + i], sigma[j * n + i])).collect();
            let mean = comps.iter().map(|c| c.0).sum::<f64>() / k as f64;
            let var = comps.iter().map(|c| c.1 * c.1 + (c.0 - mean).powi(2)).sum::<f64>() / k as f64;
            assert!((m[i] - mean).abs() < 1e-14);
            assert!((s[i] - var.sqrt()).abs() < 1e-12);
        }
    }
}

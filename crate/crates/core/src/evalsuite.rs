//! Context/target log-likelihoods, calibration error and sharpness.
//!
//! Calibration levels are `p_ℓ = ℓ/(m+1)`. For an ensemble, coverage is
//! measured per component and the squared errors are averaged over
//! components. Sharpness averages component variances over targets.

use rayon::prelude::*;
use statrs::function::erf::erf_inv;

use crate::bootstrap::{ensemble_log_density, predict_with, EnsemblePrediction, Randomness, VariantFlags};
use crate::error::{Error, Result};
use crate::fmt::sig6;
use crate::npmodels::Model;
use crate::rng;
use crate::taskgen::{Task, TaskDist};

pub const DEFAULT_LEVELS: usize = 10;
pub const CSV_HEADER: &str = "model,dataset,seed,n_tasks,context_ll,target_ll,ce,sharpness";

/// Inverse Gaussian CDF `μ + σ √2 erf⁻¹(2p − 1)`.
pub fn gaussian_quantile(mu: f64, sigma: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Contract(format!("quantile level {p} outside (0, 1)")));
    }
    Ok(mu + sigma * std::f64::consts::SQRT_2 * erf_inv(2.0 * p - 1.0))
}

/// `m` equally spaced interior levels.
pub fn calibration_levels(m: usize) -> Vec<f64> {
    (1..=m).map(|l| l as f64 / (m + 1) as f64).collect()
}

/// Running per-component coverage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    levels: Vec<f64>,
    z: Vec<f64>,
    k: usize,
    below: Vec<u64>,
    total: u64,
}

impl Calibration {
    pub fn new(k: usize, levels: &[f64]) -> Result<Self> {
        if k == 0 || levels.is_empty() {
            return Err(Error::Contract(
                "calibration needs k >= 1 and at least one level".into(),
            ));
        }
        let z = levels
            .iter()
            .map(|&p| gaussian_quantile(0.0, 1.0, p))
            .collect::<Result<_>>()?;
        Ok(Self {
            levels: levels.to_vec(),
            z,
            k,
            below: vec![0; k * levels.len()],
            total: 0,
        })
    }

    pub fn add(&mut self, pred: &EnsemblePrediction, y: &[f64]) -> Result<()> {
        if pred.k != self.k || y.len() != pred.n {
            return Err(Error::Shape(format!(
                "calibration over k = {} got k = {} with {} outputs for {} points",
                self.k,
                pred.k,
                y.len(),
                pred.n
            )));
        }
        let m = self.levels.len();
        for j in 0..self.k {
            let (mu, sigma) = pred.component(j);
            for i in 0..pred.n {
                let u = (y[i] - mu[i]) / sigma[i];
                for (l, &z) in self.z.iter().enumerate() {
                    if u <= z {
                        self.below[j * m + l] += 1;
                    }
                }
            }
        }
        self.total += pred.n as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.k != self.k || other.levels != self.levels {
            return Err(Error::Contract("merging incompatible calibration counts".into()));
        }
        for (a, b) in self.below.iter_mut().zip(&other.below) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    /// Empirical coverage `p̂_ℓ` of component `j`.
    pub fn coverage(&self, j: usize) -> Vec<f64> {
        let m = self.levels.len();
        (0..m)
            .map(|l| self.below[j * m + l] as f64 / self.total as f64)
            .collect()
    }

    pub fn error(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::Contract("calibration error of zero targets".into()));
        }
        let per_component: f64 = (0..self.k)
            .map(|j| {
                self.coverage(j)
                    .iter()
                    .zip(&self.levels)
                    .map(|(ph, p)| (p - ph).powi(2))
                    .sum::<f64>()
            })
            .sum();
        Ok(per_component / self.k as f64)
    }
}

pub fn calibration_error(pred: &EnsemblePrediction, y: &[f64], levels: &[f64]) -> Result<f64> {
    let mut c = Calibration::new(pred.k, levels)?;
    c.add(pred, y)?;
    c.error()
}

/// Mean of `σ²` over components and points.
pub fn sharpness(pred: &EnsemblePrediction) -> Result<f64> {
    if pred.n == 0 {
        return Err(Error::Contract("sharpness of zero targets".into()));
    }
    Ok(pred.sigma.iter().map(|s| s * s).sum::<f64>() / pred.sigma.len() as f64)
}

/// Metrics of one evaluated task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub context_ll: f64,
    pub target_ll: f64,
    pub sharpness: f64,
    pub calibration: Calibration,
}

fn mean_at(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

/// Mean mixture log-density over context points and over target points, from
/// a prediction at every point of the task.
pub fn split_loglik(pred: &EnsemblePrediction, task: &Task) -> Result<(f64, f64)> {
    let lp = ensemble_log_density(pred, &task.y)?;
    let targets = task.targets();
    if targets.is_empty() {
        return Err(Error::Contract("task has no target points".into()));
    }
    Ok((mean_at(&lp, &task.context), mean_at(&lp, &targets)))
}

pub fn task_metrics(pred: &EnsemblePrediction, task: &Task, levels: &[f64]) -> Result<TaskMetrics> {
    let (context_ll, target_ll) = split_loglik(pred, task)?;
    let targets = task.targets();
    let mut tp = EnsemblePrediction::new(pred.k, 0, vec![], vec![])?;
    let mut parts = Vec::with_capacity(targets.len());
    for &i in &targets {
        parts.push(pred.slice(i, i + 1));
    }
    if !parts.is_empty() {
        tp = EnsemblePrediction::concat(&parts)?;
    }
    let yt: Vec<f64> = targets.iter().map(|&i| task.y[i]).collect();
    let mut calibration = Calibration::new(pred.k, levels)?;
    calibration.add(&tp, &yt)?;
    Ok(TaskMetrics {
        context_ll,
        target_ll,
        sharpness: sharpness(&tp)?,
        calibration,
    })
}

/// Context and target log-likelihood of one task with `k` samples.
pub fn task_loglik(model: &Model, task: &Task, randomness: &Randomness, flags: VariantFlags) -> Result<(f64, f64)> {
    let pred = predict_with(model, &task.xc(), &task.yc(), &task.x, randomness, flags)?;
    split_loglik(&pred, task)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub dataset: String,
    pub batches: usize,
    pub batch_tasks: usize,
    pub k: usize,
    pub seed: u64,
    pub flags: VariantFlags,
    pub levels: usize,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: "rbf".into(),
            batches: 200,
            batch_tasks: 16,
            k: crate::bootstrap::K_TEST,
            seed: 1,
            flags: VariantFlags::default(),
            levels: DEFAULT_LEVELS,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub context_ll: f64,
    pub target_ll: f64,
    pub ce: f64,
    pub sharpness: f64,
    pub per_task: Vec<TaskMetrics>,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model,
            self.dataset,
            self.seed,
            self.n_tasks,
            sig6(self.context_ll),
            sig6(self.target_ll),
            sig6(self.ce),
            sig6(self.sharpness)
        )
    }

    /// Aggregates per-task metrics: log-likelihoods and sharpness are means
    /// over tasks, coverage is pooled over every target.
    pub fn aggregate(model: &str, dataset: &str, seed: u64, per_task: Vec<TaskMetrics>) -> Result<Self> {
        let first = per_task
            .first()
            .ok_or_else(|| Error::Contract("no tasks evaluated".into()))?;
        let mut cal = first.calibration.clone();
        for t in &per_task[1..] {
            cal.merge(&t.calibration)?;
        }
        let n = per_task.len() as f64;
        Ok(Self {
            model: model.into(),
            dataset: dataset.into(),
            seed,
            n_tasks: per_task.len(),
            context_ll: per_task.iter().map(|t| t.context_ll).sum::<f64>() / n,
            target_ll: per_task.iter().map(|t| t.target_ll).sum::<f64>() / n,
            ce: cal.error()?,
            sharpness: per_task.iter().map(|t| t.sharpness).sum::<f64>() / n,
            per_task,
        })
    }
}

/// Name used for a model in result files, e.g. `bnp` or `cnp+naive`.
pub fn model_label(model: &Model, flags: VariantFlags) -> String {
    if flags.is_full() {
        model.kind.as_str().into()
    } else {
        format!("{}+{}", model.kind.as_str(), flags.name())
    }
}

/// Evaluation tasks of a dataset; the stream is independent of training tasks.
pub fn eval_tasks(dataset: &str, seed: u64, count: usize) -> Result<Vec<Task>> {
    TaskDist::named(dataset)?.batch(seed, "eval", 0, count)
}

pub fn evaluate_tasks(model: &Model, tasks: &[Task], cfg: &EvalConfig) -> Result<EvalReport> {
    if tasks.is_empty() || cfg.k == 0 {
        return Err(Error::Contract("evaluation needs tasks and k >= 1".into()));
    }
    cfg.flags.validate(model.kind)?;
    let levels = calibration_levels(cfg.levels);
    let one = |(i, task): (usize, &Task)| -> Result<TaskMetrics> {
        let mut r = rng::stream(cfg.seed, "eval-samples", i as u64);
        let randomness = Randomness::sample(model, cfg.flags, task.n_context(), cfg.k, &mut r)?;
        let pred = predict_with(model, &task.xc(), &task.yc(), &task.x, &randomness, cfg.flags)?;
        task_metrics(&pred, task, &levels)
    };
    let per_task: Vec<Result<TaskMetrics>> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| tasks.par_iter().enumerate().map(one).collect())
    } else {
        tasks.iter().enumerate().map(one).collect()
    };
    let per_task = per_task.into_iter().collect::<Result<Vec<_>>>()?;
    EvalReport::aggregate(&model_label(model, cfg.flags), &cfg.dataset, cfg.seed, per_task)
}

/// Evaluates `batches × batch_tasks` tasks of `cfg.dataset`.
pub fn evaluate(model: &Model, cfg: &EvalConfig) -> Result<EvalReport> {
    let n = cfg.batches * cfg.batch_tasks;
    if n == 0 {
        return Err(Error::Contract("n_tasks must be positive".into()));
    }
    let tasks = eval_tasks(&cfg.dataset, cfg.seed, n)?;
    evaluate_tasks(model, &tasks, cfg)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    #[test]
    fn quantile_reference_points() {
        assert_eq!(gaussian_quantile(0.3, 2.0, 0.5).unwrap(), 0.3);
        assert!((gaussian_quantile(0.0, 1.0, 0.841344746).unwrap() - 1.0).abs() < 1e-6);
        assert!((gaussian_quantile(0.0, 1.0, 0.975).unwrap() - 1.95996).abs() < 1e-5);
        assert!(gaussian_quantile(0.0, 1.0, 0.0).is_err());
        assert!(gaussian_quantile(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn all_below_mean_gives_closed_form() {
        let pred = EnsemblePrediction::single(vec![10.0; 4], vec![0.1; 4]).unwrap();
        let ce = calibration_error(&pred, &[-5.0; 4], &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(ce, 0.875);
    }

    #[test]
    fn identical_components_keep_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let one = EnsemblePrediction::single(mu.clone(), vec![0.3; 20]).unwrap();
        let three = EnsemblePrediction::new(3, 20, mu.repeat(3), vec![0.3; 60]).unwrap();
        let levels = calibration_levels(10);
        assert_eq!(
            calibration_error(&one, &y, &levels).unwrap(),
            calibration_error(&three, &y, &levels).unwrap()
        );
    }

    #[test]
    fn exact_coverage_gives_zero_error() {
        // y at the quartile boundaries of a standard normal
        let levels = [0.25, 0.5, 0.75];
        let y: Vec<f64> = [0.2, 0.4, 0.6, 0.8]
            .iter()
            .map(|&p| gaussian_quantile(0.0, 1.0, p).unwrap())
            .collect();
        let pred = EnsemblePrediction::single(vec![0.0; 4], vec![1.0; 4]).unwrap();
        assert_eq!(calibration_error(&pred, &y, &levels).unwrap(), 0.0);
    }

    #[test]
    fn sampled_targets_are_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let y: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pred = EnsemblePrediction::single(mu, sigma).unwrap();
        assert!(calibration_error(&pred, &y, &calibration_levels(10)).unwrap() < 0.005);
    }

    #[test]
    fn sharpness_values() {
        let p = EnsemblePrediction::single(vec![0.0; 3], vec![0.1; 3]).unwrap();
        assert!((sharpness(&p).unwrap() - 0.01).abs() < 1e-15);
        let p = EnsemblePrediction::single(vec![0.0; 2], vec![0.1, 0.3]).unwrap();
        assert!((sharpness(&p).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_at_floor() {
        let task = Task::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.5, -0.5, 1.0, 2.0], vec![0, 2]).unwrap();
        let pred = EnsemblePrediction::single(task.y.clone(), vec![0.1; 4]).unwrap();
        let (c, t) = split_loglik(&pred, &task).unwrap();
        assert!((c - 1.383647).abs() < 1e-6);
        assert!((t - 1.383647).abs() < 1e-6);
    }
}

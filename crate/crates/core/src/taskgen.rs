//! Synthetic 1D regression tasks drawn from Gaussian-process priors.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fmt::sig6;

pub const X_MIN: f64 = -2.0;
pub const X_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    Rbf,
    Matern52,
    Periodic,
}

impl KernelFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(Self::Rbf),
            "matern" | "matern52" => Ok(Self::Matern52),
            "periodic" => Ok(Self::Periodic),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rbf => "rbf",
            Self::Matern52 => "matern",
            Self::Periodic => "periodic",
        }
    }
}

/// A covariance function with output scale `s`, length scale `ℓ` and, for the
/// periodic family, period `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub scale: f64,
    pub length: f64,
    pub period: f64,
}

impl KernelSpec {
    pub fn rbf(scale: f64, length: f64) -> Self {
        Self {
            family: KernelFamily::Rbf,
            scale,
            length,
            period: 1.0,
        }
    }

    pub fn matern52(scale: f64, length: f64) -> Self {
        Self {
            family: KernelFamily::Matern52,
            scale,
            length,
            period: 1.0,
        }
    }

    pub fn periodic(scale: f64, length: f64, period: f64) -> Self {
        Self {
            family: KernelFamily::Periodic,
            scale,
            length,
            period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale > 0.0 && self.length > 0.0 && self.period > 0.0;
        if !ok || !(self.scale.is_finite() && self.length.is_finite() && self.period.is_finite()) {
            return Err(Error::Config(format!("invalid kernel {self:?}")));
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        self.scale * self.scale
    }
}

/// Covariance `k(x, x')`.
///
/// The periodic form uses the distance `|x - x'|` inside the sine.
pub fn kernel_eval(spec: &KernelSpec, x: f64, xp: f64) -> f64 {
    let s2 = spec.scale * spec.scale;
    let d = (x - xp).abs();
    match spec.family {
        KernelFamily::Rbf => s2 * (-d * d / (2.0 * spec.length * spec.length)).exp(),
        KernelFamily::Matern52 => {
            let r = 5f64.sqrt() * d / spec.length;
            s2 * (1.0 + r + r * r / 3.0) * (-r).exp()
        }
        KernelFamily::Periodic => {
            let s = (std::f64::consts::PI * d / spec.period).sin();
            s2 * (-2.0 * s * s / (spec.length * spec.length)).exp()
        }
    }
}

pub fn kernel_matrix(spec: &KernelSpec, xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), ys.len(), |i, j| kernel_eval(spec, xs[i], ys[j]))
}

/// Cholesky factor of `k + (diag + jitter) I`, escalating the jitter from
/// `1e-6·s²` by factors of ten up to `1e-2·s²`.
pub fn jittered_cholesky(k: &DMatrix<f64>, diag: f64, signal_var: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut jitter = 1e-6 * signal_var;
    let max = 1e-2 * signal_var * (1.0 + 1e-9);
    loop {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += diag + jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok(c);
        }
        jitter *= 10.0;
        if jitter > max {
            return Err(Error::Cholesky { jitter: jitter / 10.0 });
        }
    }
}

/// Prior over kernel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelPrior {
    /// `s ~ U(0.1, 1)`, `ℓ ~ U(0.1, 0.6)`, `p ~ U(0.1, 0.5)`.
    Uniform(KernelFamily),
    Fixed(KernelSpec),
}

impl KernelPrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> KernelSpec {
        match *self {
            KernelPrior::Fixed(spec) => spec,
            KernelPrior::Uniform(family) => {
                let scale = rng.random_range(0.1..1.0);
                let length = rng.random_range(0.1..0.6);
                let period = if family == KernelFamily::Periodic {
                    rng.random_range(0.1..0.5)
                } else {
                    1.0
                };
                KernelSpec {
                    family,
                    scale,
                    length,
                    period,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    StudentT,
}

/// Observation noise: Gaussian with `gaussian_var`, plus `γ·t(ν)` with
/// `γ ~ U(0, t_gamma_max)` when `kind` is `StudentT`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub gaussian_var: f64,
    pub t_dof: f64,
    pub t_gamma_max: f64,
}

impl NoiseSpec {
    pub fn gaussian() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            gaussian_var: 1e-2,
            t_dof: 2.1,
            t_gamma_max: 0.15,
        }
    }

    pub fn student_t() -> Self {
        Self {
            kind: NoiseKind::StudentT,
            ..Self::gaussian()
        }
    }

    pub fn noiseless() -> Self {
        Self {
            gaussian_var: 0.0,
            ..Self::gaussian()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussian_var < 0.0 || self.t_dof <= 2.0 || self.t_gamma_max < 0.0 {
            return Err(Error::Config(format!("invalid noise spec {self:?}")));
        }
        Ok(())
    }
}

/// How many context and target points a task gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeRule {
    /// `|c| ~ U{3..47}`, `n - |c| ~ U{3..50-|c|}`.
    Upto50,
    /// `|c| ~ U{3..197}`, `n - |c| ~ U{3..200-|c|}`.
    Upto200,
    Fixed {
        context: usize,
        target: usize,
    },
}

impl SizeRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "50" | "upto50" => Ok(Self::Upto50),
            "200" | "upto200" => Ok(Self::Upto200),
            other => Err(Error::Config(format!("unknown size rule `{other}` (50|200)"))),
        }
    }

    pub fn as_str(&self) -> String {
        match self {
            Self::Upto50 => "50".into(),
            Self::Upto200 => "200".into(),
            Self::Fixed { context, target } => format!("{context}+{target}"),
        }
    }

    /// Returns `(|c|, n)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let (c, t) = match *self {
            SizeRule::Upto50 => {
                let c = rng.random_range(3..=47);
                (c, rng.random_range(3..=50 - c))
            }
            SizeRule::Upto200 => {
                let c = rng.random_range(3..=197);
                (c, rng.random_range(3..=200 - c))
            }
            SizeRule::Fixed { context, target } => (context, target),
        };
        (c, c + t)
    }
}

/// One regression episode: `n` inputs and labels, and the context index set.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Sorted, distinct context indices; a strict subset of `0..n`.
    pub context: Vec<usize>,
}

impl Task {
    pub fn new(x: Vec<f64>, y: Vec<f64>, mut context: Vec<usize>) -> Result<Self> {
        context.sort_unstable();
        context.dedup();
        let n = x.len();
        if y.len() != n {
            return Err(Error::Contract(format!("{} inputs but {} labels", n, y.len())));
        }
        if context.is_empty() || context.len() >= n || context.iter().any(|&i| i >= n) {
            return Err(Error::Contract(format!(
                "context must be a non-empty strict subset of {n} points"
            )));
        }
        Ok(Self { x, y, context })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn n_context(&self) -> usize {
        self.context.len()
    }

    pub fn is_context(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n()];
        for &i in &self.context {
            mask[i] = true;
        }
        mask
    }

    pub fn targets(&self) -> Vec<usize> {
        let mask = self.is_context();
        (0..self.n()).filter(|&i| !mask[i]).collect()
    }

    pub fn xc(&self) -> Vec<f64> {
        self.context.iter().map(|&i| self.x[i]).collect()
    }

    pub fn yc(&self) -> Vec<f64> {
        self.context.iter().map(|&i| self.y[i]).collect()
    }
}

/// Draws a task: `x ~ U(-2, 2)`, `y ~ GP(0, k) + N(0, σ²)` and a random context
/// subset; Student-t noise is added on top when the noise spec asks for it.
pub fn sample_task<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &KernelPrior,
    noise: &NoiseSpec,
    size: &SizeRule,
) -> Result<Task> {
    let kernel = prior.sample(rng);
    let (nc, n) = size.sample(rng);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(X_MIN..X_MAX)).collect();
    sample_task_at(rng, &kernel, noise, x, nc)
}

/// Like [`sample_task`] with fixed kernel, inputs and context size.
pub fn sample_task_at<R: Rng + ?Sized>(
    rng: &mut R,
    kernel: &KernelSpec,
    noise: &NoiseSpec,
    x: Vec<f64>,
    n_context: usize,
) -> Result<Task> {
    kernel.validate()?;
    noise.validate()?;
    let n = x.len();
    if n_context == 0 || n_context >= n {
        return Err(Error::Contract(format!(
            "context size {n_context} invalid for {n} points"
        )));
    }
    let y = sample_gp(rng, kernel, &x, noise.gaussian_var)?;
    let context = sample_indices(rng, n, n_context).into_vec();
    let task = Task::new(x, y, context)?;
    Ok(match noise.kind {
        NoiseKind::Gaussian => task,
        NoiseKind::StudentT => apply_t_noise(task, rng, (0.0, noise.t_gamma_max), noise.t_dof),
    })
}

/// One joint draw of `f(x) + N(0, noise_var)` at the given inputs.
pub fn sample_gp<R: Rng + ?Sized>(rng: &mut R, kernel: &KernelSpec, x: &[f64], noise_var: f64) -> Result<Vec<f64>> {
    let k = kernel_matrix(kernel, x, x);
    let chol = jittered_cholesky(&k, noise_var, kernel.variance())?;
    let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = chol.l() * z;
    Ok(y.iter().copied().collect())
}

/// A draw from Student's t with `dof` degrees of freedom: `Z / sqrt(χ²(ν)/ν)`.
pub fn student_t<R: Rng + ?Sized>(rng: &mut R, dof: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let chi = ChiSquared::new(dof).expect("dof > 0").sample(rng);
    z / (chi / dof).sqrt()
}

/// Adds `γ·t(ν)` noise to every label with one `γ ~ U(γ_lo, γ_hi)` per task.
pub fn apply_t_noise<R: Rng + ?Sized>(mut task: Task, rng: &mut R, gamma_range: (f64, f64), dof: f64) -> Task {
    let (lo, hi) = gamma_range;
    if hi <= lo && lo == 0.0 {
        return task;
    }
    let gamma = if hi > lo { rng.random_range(lo..hi) } else { lo };
    for y in &mut task.y {
        *y += gamma * student_t(rng, dof);
    }
    task
}

/// Task-generation settings for one named dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskDist {
    pub prior: KernelPrior,
    pub noise: NoiseSpec,
    pub size: SizeRule,
}

impl TaskDist {
    pub fn new(family: KernelFamily, t_noise: bool) -> Self {
        Self {
            prior: KernelPrior::Uniform(family),
            noise: if t_noise {
                NoiseSpec::student_t()
            } else {
                NoiseSpec::gaussian()
            },
            size: SizeRule::Upto50,
        }
    }

    /// Dataset names used on the command line and in result files.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "t-noise" | "rbf-tnoise" => Ok(Self::new(KernelFamily::Rbf, true)),
            other => Ok(Self::new(KernelFamily::parse(other)?, false)),
        }
    }

    pub fn name(&self) -> String {
        let fam = match self.prior {
            KernelPrior::Uniform(f) => f,
            KernelPrior::Fixed(k) => k.family,
        };
        match self.noise.kind {
            NoiseKind::StudentT => "t-noise".into(),
            NoiseKind::Gaussian => fam.as_str().into(),
        }
    }

    /// Task `index` of the stream identified by `(seed, tag)`. Retries with a
    /// fresh sub-stream if the covariance cannot be factorised.
    pub fn task(&self, seed: u64, tag: &str, index: u64) -> Result<Task> {
        let mut last = None;
        for attempt in 0..8u64 {
            let mut rng = crate::rng::stream(seed, tag, index.wrapping_add(attempt << 48));
            match sample_task(&mut rng, &self.prior, &self.noise, &self.size) {
                Ok(t) => return Ok(t),
                Err(e @ Error::Cholesky { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn batch(&self, seed: u64, tag: &str, first: u64, count: usize) -> Result<Vec<Task>> {
        (0..count as u64).map(|i| self.task(seed, tag, first + i)).collect()
    }
}

/// CSV with columns `task_id,point_id,is_context,x,y`.
pub fn tasks_to_csv(tasks: &[Task]) -> String {
    let mut out = String::from("task_id,point_id,is_context,x,y\n");
    for (t, task) in tasks.iter().enumerate() {
        let mask = task.is_context();
        for i in 0..task.n() {
            let _ = writeln!(
                out,
                "{t},{i},{},{},{}",
                u8::from(mask[i]),
                sig6(task.x[i]),
                sig6(task.y[i])
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn kernel_values() {
        let rbf = KernelSpec::rbf(0.7, 0.3);
        assert!((kernel_eval(&rbf, 0.4, 0.4) - 0.49).abs() < 1e-15);
        let unit = KernelSpec::rbf(1.0, 1.0);
        assert!((kernel_eval(&unit, 0.0, 1.0) - 0.606531).abs() < 1e-6);
        let m = KernelSpec::matern52(0.5, 0.2);
        assert!((kernel_eval(&m, 1.0, 1.0) - 0.25).abs() < 1e-15);
        let p = KernelSpec::periodic(0.8, 0.4, 0.3);
        assert!((kernel_eval(&p, -1.0, -1.0) - 0.64).abs() < 1e-15);
        // one full period apart
        assert!((kernel_eval(&p, 0.0, 0.3) - 0.64).abs() < 1e-12);
        for spec in [rbf, m, p] {
            assert_eq!(kernel_eval(&spec, 0.1, 1.3), kernel_eval(&spec, 1.3, 0.1));
        }
    }

    #[test]
    fn duplicate_inputs_survive_via_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = KernelSpec::rbf(1.0, 0.5);
        let noise = NoiseSpec::noiseless();
        let task = sample_task_at(&mut rng, &spec, &noise, vec![0.3, 0.3], 1).unwrap();
        let jitter_max: f64 = 1e-2;
        assert!((task.y[0] - task.y[1]).abs() < 10.0 * jitter_max.sqrt());
    }

    #[test]
    fn same_seed_same_task() {
        let dist = TaskDist::new(KernelFamily::Rbf, false);
        assert_eq!(dist.task(11, "t", 5).unwrap(), dist.task(11, "t", 5).unwrap());
        assert_ne!(dist.task(11, "t", 5).unwrap(), dist.task(11, "t", 6).unwrap());
        let tn = TaskDist::new(KernelFamily::Rbf, true);
        assert_eq!(tn.task(2, "t", 0).unwrap(), tn.task(2, "t", 0).unwrap());
    }

    #[test]
    fn zero_gamma_leaves_task_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Task::new(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], vec![0]).unwrap();
        assert_eq!(apply_t_noise(t.clone(), &mut rng, (0.0, 0.0), 2.1), t);
    }

    #[test]
    fn context_is_strict_nonempty_subset() {
        let dist = TaskDist::new(KernelFamily::Matern52, false);
        for i in 0..200 {
            let t = dist.task(1, "ctx", i).unwrap();
            assert!(!t.context.is_empty() && t.context.len() < t.n());
            assert!(t.context.windows(2).all(|w| w[0] < w[1]));
            assert!((3..=47).contains(&t.n_context()));
            assert!(t.n() <= 50 && t.n() - t.n_context() >= 3);
            assert!(t.x.iter().all(|x| (X_MIN..X_MAX).contains(x)));
        }
        assert!(Task::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![0, 1]).is_err());
        assert!(Task::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![]).is_err());
    }

    #[test]
    fn random_kernel_matrices_factorise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..1000 {
            let family = [KernelFamily::Rbf, KernelFamily::Matern52, KernelFamily::Periodic][i % 3];
            let spec = KernelPrior::Uniform(family).sample(&mut rng);
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(X_MIN..X_MAX)).collect();
            let k = kernel_matrix(&spec, &x, &x);
            assert_eq!(k, k.transpose());
            jittered_cholesky(&k, 0.0, spec.variance()).unwrap_or_else(|e| panic!("{spec:?}: {e}"));
        }
    }

    #[test]
    fn dump_csv_is_deterministic() {
        let dist = TaskDist::new(KernelFamily::Rbf, false);
        let a = tasks_to_csv(&dist.batch(1, "dump", 0, 4).unwrap());
        let b = tasks_to_csv(&dist.batch(1, "dump", 0, 4).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("task_id,point_id,is_context,x,y\n"));
    }
}

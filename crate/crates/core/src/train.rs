//! Training objectives, the meta-training loop and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bootstrap::{bnp_forward, latent_sample, BootstrapDraws, PipelineOptions, Randomness, VariantFlags};
use crate::diffcore::checkpoint::{RecordReader, RecordWriter};
use crate::diffcore::{adam_step, Gradients, ParamStore, Schedule, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fmt::sig6;
use crate::npmodels::{column, gauss_log_pdf, ArchConfig, GaussVars, Model, ModelKind};
use crate::rng;
use crate::taskgen::{Task, TaskDist};

/// How the `k` importance weights of the latent-variable objective are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpObjective {
    /// `log (1/k) Σ w_k`
    ImportanceWeighted,
    /// `(1/k) Σ log w_k`
    Average,
}

impl NpObjective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iw" => Ok(Self::ImportanceWeighted),
            "avg" => Ok(Self::Average),
            other => Err(Error::Config(format!("unknown np objective `{other}` (iw|avg)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ImportanceWeighted => "iw",
            Self::Average => "avg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub kernel: String,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub k: usize,
    pub seed: u64,
    pub variant: VariantFlags,
    pub d_h: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub np_objective: NpObjective,
    pub log_every: u64,
    /// Write `step_{N}.ckpt` every this many steps; `0` writes only the final one.
    pub ckpt_every: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Cnp,
            kernel: "rbf".into(),
            steps: 100_000,
            batch: 100,
            lr: 5e-4,
            k: crate::bootstrap::K_TRAIN,
            seed: 0,
            variant: VariantFlags::default(),
            d_h: 128,
            grad_clip: 0.0,
            np_objective: NpObjective::ImportanceWeighted,
            log_every: 100,
            ckpt_every: 0,
            threads: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "model",
        "kernel",
        "steps",
        "batch",
        "lr",
        "k",
        "seed",
        "variant",
        "d_h",
        "grad_clip",
        "np_objective",
        "log_every",
        "ckpt_every",
        "threads",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = ModelKind::parse(value)?,
            "kernel" => {
                TaskDist::named(value)?;
                self.kernel = value.to_string();
            }
            "steps" => self.steps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "variant" => self.variant = VariantFlags::parse(value)?,
            "d_h" => self.d_h = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "np_objective" => self.np_objective = NpObjective::parse(value)?,
            "log_every" => self.log_every = parse_num(key, value)?,
            "ckpt_every" => self.ckpt_every = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model" => self.model.as_str().into(),
            "kernel" => self.kernel.clone(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => format!("{:?}", self.lr),
            "k" => self.k.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.name(),
            "d_h" => self.d_h.to_string(),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "np_objective" => self.np_objective.as_str().into(),
            "log_every" => self.log_every.to_string(),
            "ckpt_every" => self.ckpt_every.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// `key = value` lines that [`TrainConfig::from_kv`] reads back exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.k == 0 || self.d_h == 0 || self.threads == 0 {
            return Err(Error::Config("batch, k, d_h and threads must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.variant.validate(self.model)?;
        TaskDist::named(&self.kernel)?;
        self.arch().validate(self.model)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig::regression_1d(self.model, self.d_h)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            k: self.k,
            flags: self.variant,
            np_objective: self.np_objective,
            detach: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub k: usize,
    pub flags: VariantFlags,
    pub np_objective: NpObjective,
    pub detach: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: crate::bootstrap::K_TRAIN,
            flags: VariantFlags::default(),
            np_objective: NpObjective::ImportanceWeighted,
            detach: true,
        }
    }
}

/// Randomness a training loss draws for one task.
pub fn sample_loss_randomness(
    model: &Model,
    task: &Task,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Randomness> {
    if model.kind.is_bootstrap() {
        Ok(Randomness::Bootstrap(BootstrapDraws::sample(
            rng,
            task.n_context(),
            cfg.k,
        )?))
    } else {
        // the naive variant is a test-time procedure; its training is plain
        let flags = if cfg.flags.naive_bootstrap {
            VariantFlags::default()
        } else {
            cfg.flags
        };
        Randomness::sample(model, flags, task.n_context(), cfg.k, rng)
    }
}

fn mean_log_lik(tape: &mut Tape<'_>, y: Var, pred: GaussVars) -> Result<Var> {
    let lp = gauss_log_pdf(tape, y, pred.mu, pred.sigma)?;
    Ok(tape.mean(lp))
}

/// `log (1/k) Σ_j N(y_i | μ_ij, σ_ij²)` for every point, from `k·n`
/// component-major rows.
pub fn mixture_log_density(tape: &mut Tape<'_>, y: Var, comps: GaussVars, k: usize) -> Result<Var> {
    let [n, _] = tape.shape(y);
    let ys = tape.tile_rows(y, k);
    let lp = gauss_log_pdf(tape, ys, comps.mu, comps.sigma)?;
    let lp = tape.reshape(lp, k, n)?;
    let lp = tape.transpose(lp);
    let lse = tape.logsumexp_cols(lp);
    Ok(tape.add_scalar(lse, -(k as f64).ln()))
}

/// Negative Gaussian log-likelihood averaged over all points of one task.
pub fn cnp_task_loss(model: &Model, tape: &mut Tape<'_>, task: &Task) -> Result<Var> {
    let xc = column(tape, &task.xc());
    let yc = column(tape, &task.yc());
    let x = column(tape, &task.x);
    let y = column(tape, &task.y);
    let pred = model.predict_det(tape, xc, yc, x)?;
    let ll = mean_log_lik(tape, y, pred)?;
    Ok(tape.neg(ll))
}

/// Negative multi-sample latent-variable objective of one task, divided by the
/// number of points. `noise` holds one standard-normal row per sample.
pub fn np_task_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    task: &Task,
    noise: &Tensor,
    objective: NpObjective,
) -> Result<Var> {
    let k = noise.rows();
    let n = task.n();
    let dz = model.arch.d_z;
    let xc = column(tape, &task.xc());
    let yc = column(tape, &task.yc());
    let x = column(tape, &task.x);
    let y = column(tape, &task.y);
    let q_full = model.latent_encode(tape, x, y)?;
    let q_ctx = model.latent_encode(tape, xc, yc)?;
    let z = latent_sample(tape, q_full.eta, q_full.rho, noise.clone())?;
    let pred = model.predict_latent(tape, xc, yc, z, x)?;

    let ys = tape.tile_rows(y, k);
    let lp = gauss_log_pdf(tape, ys, pred.mu, pred.sigma)?;
    let lp = tape.reshape(lp, k, n)?;
    let lp = tape.transpose(lp);
    let ll = tape.mean_rows(lp)?;
    let ll = tape.scale(ll, n as f64);

    let log_q = |tape: &mut Tape<'_>, eta: Var, rho: Var| -> Result<Var> {
        let eta = tape.repeat_rows(eta, k);
        let rho = tape.repeat_rows(rho, k);
        let lq = gauss_log_pdf(tape, z, eta, rho)?;
        let lq = tape.transpose(lq);
        let lq = tape.mean_rows(lq)?;
        Ok(tape.scale(lq, dz as f64))
    };
    let lq_ctx = log_q(tape, q_ctx.eta, q_ctx.rho)?;
    let lq_full = log_q(tape, q_full.eta, q_full.rho)?;
    let ratio = tape.sub(lq_ctx, lq_full)?;
    let log_w = tape.add(ll, ratio)?;
    let combined = match objective {
        NpObjective::ImportanceWeighted => {
            let lse = tape.logsumexp_cols(log_w);
            tape.add_scalar(lse, -(k as f64).ln())
        }
        NpObjective::Average => tape.mean(log_w),
    };
    Ok(tape.scale(combined, -1.0 / n as f64))
}

/// Negative of `mean_i log p_base(y_i) + mean_i log (1/k) Σ_j N(y_i | μ_ij, σ_ij²)`
/// over all points of one task.
pub fn bnp_task_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    task: &Task,
    draws: &BootstrapDraws,
    opts: PipelineOptions,
) -> Result<Var> {
    if opts.flags.naive_bootstrap {
        return Err(Error::Config(
            "the naive variant is not trained through the bootstrap loss".into(),
        ));
    }
    let out = bnp_forward(model, tape, &task.xc(), &task.yc(), &task.x, draws, opts)?;
    let y = column(tape, &task.y);
    let mix = mixture_log_density(tape, y, out.components, out.k)?;
    let mix = tape.mean(mix);
    let total = if opts.flags.skip_base_loss {
        mix
    } else {
        let base = mean_log_lik(tape, y, out.base)?;
        tape.add(base, mix)?
    };
    Ok(tape.neg(total))
}

/// Loss node of one task for any model family.
pub fn task_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    task: &Task,
    randomness: &Randomness,
    cfg: &LossConfig,
) -> Result<Var> {
    match randomness {
        Randomness::Bootstrap(draws) if model.kind.is_bootstrap() => bnp_task_loss(
            model,
            tape,
            task,
            draws,
            PipelineOptions {
                flags: cfg.flags,
                detach: cfg.detach,
            },
        ),
        Randomness::Latent(noise) => np_task_loss(model, tape, task, noise, cfg.np_objective),
        Randomness::None => cnp_task_loss(model, tape, task),
        Randomness::Bootstrap(_) => Err(Error::Contract(format!(
            "{} is not trained with bootstrap draws",
            model.kind.as_str()
        ))),
    }
}

fn check_batch(tasks: &[Task], randomness: &[Randomness]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if tasks.len() != randomness.len() {
        return Err(Error::Contract(format!(
            "{} tasks with {} randomness records",
            tasks.len(),
            randomness.len()
        )));
    }
    Ok(())
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(model: &Model, tasks: &[Task], randomness: &[Randomness], cfg: &LossConfig) -> Result<f64> {
    check_batch(tasks, randomness)?;
    let mut total = 0.0;
    for (task, r) in tasks.iter().zip(randomness) {
        let mut tape = Tape::inference(&model.store);
        let l = task_loss(model, &mut tape, task, r, cfg)?;
        total += tape.scalar(l)?;
    }
    Ok(total / tasks.len() as f64)
}

pub fn cnp_loss(model: &Model, tasks: &[Task]) -> Result<f64> {
    let r = vec![Randomness::None; tasks.len()];
    batch_loss(model, tasks, &r, &LossConfig::default())
}

pub fn np_elbo_loss(model: &Model, tasks: &[Task], noise: &[Tensor], objective: NpObjective) -> Result<f64> {
    let r: Vec<_> = noise.iter().cloned().map(Randomness::Latent).collect();
    let cfg = LossConfig {
        np_objective: objective,
        ..LossConfig::default()
    };
    batch_loss(model, tasks, &r, &cfg)
}

pub fn bnp_loss(model: &Model, tasks: &[Task], draws: &[BootstrapDraws], opts: PipelineOptions) -> Result<f64> {
    let r: Vec<_> = draws.iter().cloned().map(Randomness::Bootstrap).collect();
    let cfg = LossConfig {
        flags: opts.flags,
        detach: opts.detach,
        ..LossConfig::default()
    };
    batch_loss(model, tasks, &r, &cfg)
}

fn one_task_grad(model: &Model, task: &Task, r: &Randomness, cfg: &LossConfig) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&model.store);
    let l = task_loss(model, &mut tape, task, r, cfg)?;
    let v = tape.scalar(l)?;
    Ok((v, tape.backward(l)?))
}

/// Mean batch loss; the gradient of the mean is added into the store's
/// gradient slots. Per-task gradients are summed in task order whatever the
/// thread count.
pub fn loss_and_grad(
    model: &mut Model,
    tasks: &[Task],
    randomness: &[Randomness],
    cfg: &LossConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    check_batch(tasks, randomness)?;
    let results: Vec<Result<(f64, Gradients)>> = {
        let m = &*model;
        match pool {
            Some(p) => p.install(|| {
                tasks
                    .par_iter()
                    .zip(randomness)
                    .map(|(t, r)| one_task_grad(m, t, r, cfg))
                    .collect()
            }),
            None => tasks
                .iter()
                .zip(randomness)
                .map(|(t, r)| one_task_grad(m, t, r, cfg))
                .collect(),
        }
    };
    let scale = 1.0 / tasks.len() as f64;
    let mut total = 0.0;
    for r in results {
        let (v, g) = r?;
        total += v;
        model.store.accumulate(&g, scale);
    }
    Ok(total * scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,loss,lr,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, sig6(self.loss), sig6(self.lr), self.wall_ms)
    }
}

const MAGIC: &[u8; 8] = b"BNPCKPT1";

/// Training state: configuration, parameters with optimizer moments, the
/// noise generator and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Checkpoint {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.arch();
        let mut init = rng::stream(config.seed, "init", 0);
        let model = Model::new(config.model, arch, &mut init)?;
        Ok(Self {
            config: config.clone(),
            arch,
            store: model.store,
            rng: rng::stream(config.seed, "train-noise", 0),
            step: 0,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::with_store(self.config.model, self.arch, self.store.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = RecordWriter::new();
        w.bytes(MAGIC);
        w.str(&self.config.to_kv());
        let a = &self.arch;
        for v in [
            a.l_pre, a.l_post, a.l_dec, a.l_v, a.l_qk, a.d_h, a.d_z, a.n_head, a.d_x, a.d_y,
        ] {
            w.u64(v as u64);
        }
        w.u64(self.step);
        w.store(&self.store);
        w.rng(&self.rng);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = RecordReader::new(bytes);
        if r.bytes(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let config = TrainConfig::from_kv(&r.str()?)?;
        let mut f = [0usize; 10];
        for v in &mut f {
            *v = r.u64()? as usize;
        }
        let arch = ArchConfig {
            l_pre: f[0],
            l_post: f[1],
            l_dec: f[2],
            l_v: f[3],
            l_qk: f[4],
            d_h: f[5],
            d_z: f[6],
            n_head: f[7],
            d_x: f[8],
            d_y: f[9],
        };
        let step = r.u64()?;
        let store = r.store()?;
        let rng = r.rng()?;
        if !r.is_at_end() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Model::with_store(config.model, arch, store.clone())?;
        Ok(Self {
            config,
            arch,
            store,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `dir/step_{N}.ckpt`
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step}.ckpt"))
}

/// Writes through a temporary file in the same directory and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let res = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Where and how often the loop reports.
#[derive(Default)]
pub struct TrainOutput<'a> {
    /// Directory for `step_{N}.ckpt` files.
    pub dir: Option<&'a Path>,
    pub on_log: Option<&'a mut dyn FnMut(&LogRow)>,
}

/// Tasks of training step `step`.
pub fn step_tasks(config: &TrainConfig, step: u64) -> Result<Vec<Task>> {
    let dist = TaskDist::named(&config.kernel)?;
    dist.batch(config.seed, "train", step * config.batch as u64, config.batch)
}

/// Runs the remaining steps of `ckpt` and returns the final state.
///
/// On a non-finite loss or gradient the last good state is written (when a
/// directory is given) and [`Error::Diverged`] is returned.
pub fn train_from(mut ckpt: Checkpoint, mut out: TrainOutput<'_>) -> Result<Checkpoint> {
    let config = ckpt.config.clone();
    config.validate()?;
    let cfg = config.loss_config();
    let schedule = Schedule::new(config.lr, config.steps);
    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let mut model = ckpt.model()?;
    let start = Instant::now();
    let mut window = (0.0, 0u64);
    while ckpt.step < config.steps {
        let step = ckpt.step;
        let tasks = step_tasks(&config, step)?;
        let mut rng = ckpt.rng.clone();
        let randomness = tasks
            .iter()
            .map(|t| sample_loss_randomness(&model, t, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        model.store.zero_grads();
        let diverged = |loss: f64| Error::Diverged { step, loss };
        let loss = match loss_and_grad(&mut model, &tasks, &randomness, &cfg, pool.as_ref()) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => return Err(abort(&ckpt, &out, diverged(l))),
            Err(Error::NonFinite { .. }) => return Err(abort(&ckpt, &out, diverged(f64::NAN))),
            Err(e) => return Err(e),
        };
        if config.grad_clip > 0.0 {
            let norm = model.store.grad_norm();
            if norm > config.grad_clip {
                model.store.scale_grads(config.grad_clip / norm);
            }
        }
        let lr = schedule.lr(step);
        if let Err(e) = adam_step(&mut model.store, lr) {
            return Err(match e {
                Error::NonFiniteGradient(_) => abort(&ckpt, &out, diverged(loss)),
                other => other,
            });
        }
        ckpt.store = model.store.clone();
        ckpt.rng = rng;
        ckpt.step = step + 1;
        window.0 += loss;
        window.1 += 1;
        let log_now = config.log_every > 0 && (ckpt.step % config.log_every == 0 || ckpt.step == config.steps);
        if log_now {
            let row = LogRow {
                step: ckpt.step,
                loss: window.0 / window.1 as f64,
                lr,
                wall_ms: start.elapsed().as_millis(),
            };
            window = (0.0, 0);
            if let Some(f) = out.on_log.as_mut() {
                f(&row);
            }
        }
        if let Some(dir) = out.dir {
            if config.ckpt_every > 0 && ckpt.step % config.ckpt_every == 0 && ckpt.step != config.steps {
                ckpt.save(&checkpoint_path(dir, ckpt.step))?;
            }
        }
    }
    if let Some(dir) = out.dir {
        ckpt.save(&checkpoint_path(dir, ckpt.step))?;
    }
    Ok(ckpt)
}

fn abort(ckpt: &Checkpoint, out: &TrainOutput<'_>, err: Error) -> Error {
    if let Some(dir) = out.dir {
        if let Err(e) = ckpt.save(&checkpoint_path(dir, ckpt.step)) {
            return e;
        }
    }
    err
}

pub fn train(config: &TrainConfig, out: TrainOutput<'_>) -> Result<Checkpoint> {
    train_from(Checkpoint::init(config)?, out)
}

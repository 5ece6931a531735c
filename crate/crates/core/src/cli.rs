//! Command-line driver: `train`, `eval`, `bo`, `ablate` and `dump-tasks`.
//!
//! Every subcommand has a fixed option table. Values are resolved from the
//! table defaults, then an optional `--config FILE` of `key = value` lines
//! (`#` starts a comment), then command-line flags. Keys unknown to the
//! subcommand are rejected. All randomness derives from `seed` through
//! [`crate::rng::derive_seed`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::bayesopt::{bo_run_partial, mean_final_regret, Objective, Surrogate, TRACE_HEADER};
use crate::bootstrap::VariantFlags;
use crate::error::{Error, Result};
use crate::evalsuite::{eval_tasks, evaluate, evaluate_tasks, EvalConfig, EvalReport, CSV_HEADER};
use crate::npmodels::ModelKind;
use crate::taskgen::{tasks_to_csv, KernelFamily, TaskDist};
use crate::train::{
    checkpoint_path, train_from, write_atomic, Checkpoint, LogRow, TrainConfig, TrainOutput, LOG_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Value,
    Switch,
}

struct Opt {
    key: &'static str,
    default: &'static str,
    help: &'static str,
    kind: Kind,
}

const fn val(key: &'static str, default: &'static str, help: &'static str) -> Opt {
    Opt {
        key,
        default,
        help,
        kind: Kind::Value,
    }
}

const fn switch(key: &'static str, help: &'static str) -> Opt {
    Opt {
        key,
        default: "false",
        help,
        kind: Kind::Switch,
    }
}

const TRAIN_OPTS: &[Opt] = &[
    val("model", "cnp", "cnp | np | canp | anp | bnp | banp"),
    val(
        "kernel",
        "rbf",
        "training task family: rbf | matern | periodic | t-noise",
    ),
    val("steps", "100000", "optimizer steps"),
    val("batch", "100", "tasks per step"),
    val("lr", "0.0005", "initial learning rate (cosine-annealed to zero)"),
    val("k", "4", "latent samples or bootstrap components per task"),
    val("seed", "0", "master seed"),
    val("variant", "full", "full | naive | no-paired | no-adapt | no-baseloss"),
    val("d_h", "128", "hidden width"),
    val("grad_clip", "0", "global gradient-norm clip, 0 disables"),
    val("np_objective", "iw", "combination of latent samples: iw | avg"),
    val("log_every", "100", "steps per training-log row"),
    val("ckpt_every", "0", "steps per intermediate checkpoint, 0 for final only"),
    val("threads", "1", "worker threads for per-task gradients"),
    val("out", "runs/train", "output directory"),
];

const EVAL_OPTS: &[Opt] = &[
    val("ckpt", "", "checkpoint file"),
    val(
        "kernel",
        "rbf",
        "evaluation task family: rbf | matern | periodic | t-noise",
    ),
    switch("t_noise", "evaluate on RBF tasks with Student-t noise"),
    val("k", "50", "samples or bootstrap components per task"),
    val("batches", "200", "evaluation batches"),
    val("batch_tasks", "16", "tasks per batch"),
    val("seed", "1", "evaluation seed"),
    val(
        "variant",
        "",
        "bootstrap variant at test time (default: the checkpoint's)",
    ),
    val("levels", "10", "calibration levels"),
    val("threads", "1", "worker threads"),
    val("out", "results.csv", "results CSV"),
];

const BO_OPTS: &[Opt] = &[
    val("ckpt", "", "checkpoint of the surrogate model"),
    switch("oracle", "use the GP oracle surrogate"),
    switch("random", "use random search"),
    val("objective_kernel", "rbf", "rbf | matern | periodic | rbf-tnoise"),
    val("functions", "100", "objective functions"),
    val("iters", "100", "acquisition steps per function"),
    val("init_points", "1", "initial observations"),
    val("k", "50", "samples or bootstrap components per prediction"),
    val("seed", "0", "seed of objectives and initial designs"),
    val(
        "variant",
        "",
        "bootstrap variant at test time (default: the checkpoint's)",
    ),
    val("out", "trace.csv", "trace CSV"),
];

const ABLATE_OPTS: &[Opt] = &[
    val("kernel", "rbf", "training task family"),
    val("steps", "20000", "optimizer steps per model"),
    val("batch", "16", "tasks per step"),
    val("lr", "0.0005", "initial learning rate"),
    val("k", "4", "bootstrap components in training"),
    val("d_h", "64", "hidden width"),
    val("seed", "0", "training seed"),
    val("threads", "1", "worker threads"),
    val("datasets", "rbf,t-noise", "comma-separated evaluation families"),
    val("batches", "200", "evaluation batches"),
    val("batch_tasks", "16", "tasks per evaluation batch"),
    val("k_test", "50", "bootstrap components in evaluation"),
    val("eval_seed", "1", "evaluation seed"),
    val(
        "out",
        "runs/ablate",
        "output directory (checkpoints are reused when present)",
    ),
];

const DUMP_OPTS: &[Opt] = &[
    val("kernel", "rbf", "rbf | matern | periodic | t-noise"),
    val("n", "4", "number of tasks"),
    val("seed", "0", "seed"),
    val("out", "", "output CSV (stdout when empty)"),
];

const SUBCOMMANDS: &[(&str, &str, &[Opt])] = &[
    ("train", "meta-train a model", TRAIN_OPTS),
    ("eval", "evaluate a checkpoint", EVAL_OPTS),
    ("bo", "Bayesian optimisation with a surrogate", BO_OPTS),
    ("ablate", "train and compare the bootstrap variants", ABLATE_OPTS),
    ("dump-tasks", "write sampled tasks as CSV", DUMP_OPTS),
];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("bnp")
        .about("Neural processes with bootstrapping: training, evaluation and Bayesian optimisation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, opts) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("file of `key = value` lines"),
        );
        for o in *opts {
            let arg = Arg::new(o.key).long(flag_name(o.key));
            sub = sub.arg(match o.kind {
                Kind::Value if o.default.is_empty() => arg.value_name("VALUE").help(o.help),
                Kind::Value => arg
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", o.help, o.default)),
                Kind::Switch => arg.action(ArgAction::SetTrue).help(o.help),
            });
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Subcommand name and fully resolved option values.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!("`{key}` expects true or false, got `{other}`"))),
        }
    }

    /// `key = value` lines of every resolved option.
    pub fn describe(&self) -> String {
        let mut s = format!("# {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![];
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

fn resolve(name: &str, matches: &ArgMatches) -> Result<RunConfig> {
    let opts = SUBCOMMANDS
        .iter()
        .find(|(n, ..)| *n == name)
        .map(|(_, _, o)| *o)
        .ok_or_else(|| Error::Config(format!("unknown subcommand `{name}`")))?;
    let mut values: BTreeMap<String, String> = opts
        .iter()
        .map(|o| (o.key.to_string(), o.default.to_string()))
        .collect();
    if let Some(path) = matches.get_one::<String>("config") {
        for (k, v) in parse_config_file(Path::new(path))? {
            if !values.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}` for `{name}` in {path}")));
            }
            values.insert(k, v);
        }
    }
    for o in opts {
        let given = matches.value_source(o.key) == Some(clap::parser::ValueSource::CommandLine);
        if !given {
            continue;
        }
        let v = match o.kind {
            Kind::Value => matches.get_one::<String>(o.key).cloned().unwrap_or_default(),
            Kind::Switch => "true".into(),
        };
        values.insert(o.key.to_string(), v);
    }
    let cfg = RunConfig {
        command: name.to_string(),
        values,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    match cfg.command.as_str() {
        "train" => train_config(cfg)?.validate(),
        "eval" => {
            eval_config(cfg, None)?;
            if !cfg.get("variant").is_empty() {
                VariantFlags::parse(cfg.get("variant"))?;
            }
            Ok(())
        }
        "bo" => {
            let (oracle, random) = (cfg.flag("oracle")?, cfg.flag("random")?);
            if oracle && random {
                return Err(Error::Config("choose one of --oracle and --random".into()));
            }
            if !oracle && !random && cfg.get("ckpt").is_empty() {
                return Err(Error::Config("bo needs --ckpt, --oracle or --random".into()));
            }
            TaskDist::named(cfg.get("objective_kernel"))?;
            for key in ["functions", "iters", "init_points", "k"] {
                if cfg.num::<usize>(key)? == 0 {
                    return Err(Error::Config(format!("`{key}` must be positive")));
                }
            }
            cfg.num::<u64>("seed")?;
            if !cfg.get("variant").is_empty() {
                VariantFlags::parse(cfg.get("variant"))?;
            }
            Ok(())
        }
        "ablate" => {
            ablate_base(cfg)?.validate()?;
            for d in datasets(cfg) {
                TaskDist::named(&d)?;
            }
            for key in ["batches", "batch_tasks", "k_test"] {
                if cfg.num::<usize>(key)? == 0 {
                    return Err(Error::Config(format!("`{key}` must be positive")));
                }
            }
            cfg.num::<u64>("eval_seed")?;
            Ok(())
        }
        "dump-tasks" => {
            TaskDist::named(cfg.get("kernel"))?;
            cfg.num::<usize>("n")?;
            cfg.num::<u64>("seed")?;
            Ok(())
        }
        other => Err(Error::Config(format!("unknown subcommand `{other}`"))),
    }
}

/// Parses `argv` (including the program name) into a validated configuration.
pub fn parse_args<I, T>(argv: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = command()
        .try_get_matches_from(argv)
        .map_err(|e| Error::Config(e.to_string()))?;
    let (name, sub) = matches
        .subcommand()
        .ok_or_else(|| Error::Config("missing subcommand".into()))?;
    resolve(name, sub)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let mut t = TrainConfig::default();
    for key in TrainConfig::KEYS {
        t.set(key, cfg.get(key))?;
    }
    Ok(t)
}

fn eval_config(cfg: &RunConfig, ckpt_flags: Option<VariantFlags>) -> Result<EvalConfig> {
    let dataset = if cfg.flag("t_noise")? {
        "t-noise".to_string()
    } else {
        cfg.get("kernel").to_string()
    };
    TaskDist::named(&dataset)?;
    let flags = match cfg.get("variant") {
        "" => ckpt_flags.unwrap_or_default(),
        v => VariantFlags::parse(v)?,
    };
    let e = EvalConfig {
        dataset,
        batches: cfg.num("batches")?,
        batch_tasks: cfg.num("batch_tasks")?,
        k: cfg.num("k")?,
        seed: cfg.num("seed")?,
        flags,
        levels: cfg.num("levels")?,
        threads: cfg.num("threads")?,
    };
    if e.batches == 0 || e.batch_tasks == 0 || e.k == 0 || e.levels == 0 || e.threads == 0 {
        return Err(Error::Config(
            "batches, batch_tasks, k, levels and threads must be positive".into(),
        ));
    }
    Ok(e)
}

fn ablate_base(cfg: &RunConfig) -> Result<TrainConfig> {
    let mut t = TrainConfig {
        model: ModelKind::Bnp,
        log_every: 1000,
        ..TrainConfig::default()
    };
    for key in ["kernel", "steps", "batch", "lr", "k", "d_h", "seed", "threads"] {
        t.set(key, cfg.get(key))?;
    }
    Ok(t)
}

fn datasets(cfg: &RunConfig) -> Vec<String> {
    cfg.get("datasets")
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Trains `config` into `dir`, resuming from the newest checkpoint found there
/// if its configuration matches.
pub fn train_into(config: &TrainConfig, dir: &Path, quiet: bool) -> Result<Checkpoint> {
    let final_path = checkpoint_path(dir, config.steps);
    if let Ok(ck) = Checkpoint::load(&final_path) {
        if ck.config == *config && ck.step == config.steps {
            return Ok(ck);
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.txt"), &config.to_kv())?;
    let mut log = format!("{LOG_HEADER}\n");
    let mut on_log = |r: &LogRow| {
        if !quiet {
            eprintln!(
                "step {} loss {} lr {}",
                r.step,
                crate::fmt::sig6(r.loss),
                crate::fmt::sig6(r.lr)
            );
        }
        log.push_str(&r.csv());
        log.push('\n');
    };
    let result = train_from(
        Checkpoint::init(config)?,
        TrainOutput {
            dir: Some(dir),
            on_log: Some(&mut on_log),
        },
    );
    write_text(&dir.join("train_log.csv"), &log)?;
    result
}

fn run_train(cfg: &RunConfig) -> Result<()> {
    let t = train_config(cfg)?;
    let dir = PathBuf::from(cfg.get("out"));
    let ck = train_into(&t, &dir, false)?;
    eprintln!("wrote {}", checkpoint_path(&dir, ck.step).display());
    Ok(())
}

fn run_eval(cfg: &RunConfig) -> Result<()> {
    let path = PathBuf::from(cfg.get("ckpt"));
    if cfg.get("ckpt").is_empty() {
        return Err(Error::Config("eval needs --ckpt".into()));
    }
    let ck = Checkpoint::load(&path)?;
    let model = ck.model()?;
    let e = eval_config(cfg, Some(ck.config.variant))?;
    let report = evaluate(&model, &e)?;
    let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row());
    write_text(Path::new(cfg.get("out")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_bo(cfg: &RunConfig) -> Result<()> {
    let family = cfg.get("objective_kernel").to_string();
    let loaded;
    let surrogate = if cfg.flag("oracle")? {
        let fam = if family == "rbf-tnoise" || family == "t-noise" {
            KernelFamily::Rbf
        } else {
            KernelFamily::parse(&family)?
        };
        Surrogate::oracle(fam)
    } else if cfg.flag("random")? {
        Surrogate::Random
    } else {
        let ck = Checkpoint::load(Path::new(cfg.get("ckpt")))?;
        loaded = (ck.model()?, ck.config.variant);
        let flags = match cfg.get("variant") {
            "" => loaded.1,
            v => VariantFlags::parse(v)?,
        };
        flags.validate(loaded.0.kind)?;
        Surrogate::Model {
            model: &loaded.0,
            k: cfg.num("k")?,
            flags,
        }
    };
    let (functions, iters, init, seed): (u64, usize, usize, u64) = (
        cfg.num("functions")?,
        cfg.num("iters")?,
        cfg.num("init_points")?,
        cfg.num("seed")?,
    );
    let mut csv = format!("{TRACE_HEADER}\n");
    let mut traces = vec![];
    for f in 0..functions {
        let obj = Objective::sample(&family, seed, f)?;
        let (trace, res) = bo_run_partial(&surrogate, &obj, iters, init, seed, f);
        csv.push_str(&trace.csv_rows());
        if let Err(e) = res {
            write_text(Path::new(cfg.get("out")), &csv)?;
            return Err(e);
        }
        traces.push(trace);
    }
    write_text(Path::new(cfg.get("out")), &csv)?;
    eprintln!(
        "{}: mean final simple regret {}",
        surrogate.label(),
        crate::fmt::sig6(mean_final_regret(&traces))
    );
    Ok(())
}

/// Configurations trained by `ablate`: full BNP, its three training-time
/// ablations, and the CNP that the naive variant bootstraps at test time.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = vec![];
    for v in ["full", "no-paired", "no-adapt", "no-baseloss"] {
        let c = TrainConfig {
            model: ModelKind::Bnp,
            variant: VariantFlags::parse(v).expect("known variant"),
            ..base.clone()
        };
        out.push((format!("bnp-{v}"), c));
    }
    let naive = TrainConfig {
        model: ModelKind::Cnp,
        variant: VariantFlags::parse("naive").expect("known variant"),
        ..base.clone()
    };
    out.push(("cnp-naive".into(), naive));
    out
}

fn run_ablate(cfg: &RunConfig) -> Result<()> {
    let base = ablate_base(cfg)?;
    let out = PathBuf::from(cfg.get("out"));
    let n_tasks = cfg.num::<usize>("batches")? * cfg.num::<usize>("batch_tasks")?;
    let eval_seed: u64 = cfg.num("eval_seed")?;
    let mut csv = format!("{CSV_HEADER}\n");
    let mut task_sets = vec![];
    for d in datasets(cfg) {
        task_sets.push((d.clone(), eval_tasks(&d, eval_seed, n_tasks)?));
    }
    for (name, tc) in ablation_configs(&base) {
        eprintln!("training {name}");
        let ck = train_into(&tc, &out.join(&name), true)?;
        let model = ck.model()?;
        for (d, tasks) in &task_sets {
            let e = EvalConfig {
                dataset: d.clone(),
                batches: cfg.num("batches")?,
                batch_tasks: cfg.num("batch_tasks")?,
                k: cfg.num("k_test")?,
                seed: eval_seed,
                flags: tc.variant,
                threads: base.threads,
                ..EvalConfig::default()
            };
            let report: EvalReport = evaluate_tasks(&model, tasks, &e)?;
            eprintln!("{}", report.csv_row());
            csv.push_str(&report.csv_row());
            csv.push('\n');
        }
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_dump(cfg: &RunConfig) -> Result<()> {
    let dist = TaskDist::named(cfg.get("kernel"))?;
    let tasks = dist.batch(cfg.num("seed")?, "dump", 0, cfg.num("n")?)?;
    let csv = tasks_to_csv(&tasks);
    match cfg.get("out") {
        "" => print!("{csv}"),
        p => write_text(Path::new(p), &csv)?,
    }
    Ok(())
}

/// Dispatches a resolved configuration.
pub fn run_command(cfg: &RunConfig) -> Result<()> {
    match cfg.command.as_str() {
        "train" => run_train(cfg),
        "eval" => run_eval(cfg),
        "bo" => run_bo(cfg),
        "ablate" => run_ablate(cfg),
        "dump-tasks" => run_dump(cfg),
        other => Err(Error::Config(format!("unknown subcommand `{other}`"))),
    }
}

/// Runs and maps the outcome to an exit code, printing any error.
pub fn run(cfg: &RunConfig) -> i32 {
    eprint!("{}", cfg.describe());
    match run_command(cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point of the `bnp` binary.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return 2;
    };
    match resolve(name, sub) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

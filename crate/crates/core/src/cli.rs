//! Experiment front-end for the `uoep` binary.
//!
//! Configuration is a flat `key = value` file (`#` starts a comment) merged
//! with command-line overrides. Every run directory receives the resolved
//! configuration, the seed, `metrics.jsonl`, `curves.csv` and a `checkpoint/`
//! directory.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::critic::QuantileFunction;
use crate::env::{
    load_interaction_log, synthesize_log, write_interaction_log, write_population, Environment, LogFitConfig,
    SessionConfig,
};
use crate::metrics;
use crate::nn::Matrix;
use crate::population::{Grouping, PopulationConfig};
use crate::trainer::{
    evaluate, load_checkpoint, Ablation, EnvConfig, MetricsRecord, TrainConfig, Trainer,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const CONFIG_FILE: &str = "config.txt";
pub const SEED_FILE: &str = "seed.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CURVES_FILE: &str = "curves.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Every recognised key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("ablation", "none"),
    ("actor_hidden", "64,32"),
    ("actor_lr", "5e-4"),
    ("alphas", "0.2,0.4,0.6,0.8,1.0"),
    ("bandit_window", "10"),
    ("batch_size", "64"),
    ("beta", "0.5"),
    ("critic_hidden", "256,64"),
    ("critic_lr", "1e-3"),
    ("env", "synthetic"),
    ("env_dim", "8"),
    ("env_heterogeneity", "1.0"),
    ("env_items", "100"),
    ("env_seed", "0"),
    ("env_users", "200"),
    ("eval_episodes", "50"),
    ("eval_interval", "500"),
    ("gamma", "0.9"),
    ("grouping", "nested"),
    ("history_window", "10"),
    ("horizon", "auto"),
    ("initial_temper", "10"),
    ("jitter", "1e-4"),
    ("k_cvar", "8"),
    ("k_infer", "32"),
    ("kappa", "1.0"),
    ("lambda", "16"),
    ("length_scale", "1.0"),
    ("list_size", "10"),
    ("log_fit_epochs", "400"),
    ("max_depth", "20"),
    ("mu", "0.01"),
    ("n_quantiles", "32"),
    ("n_target_quantiles", "32"),
    ("noise", "0.1"),
    ("replay_capacity", "100000"),
    ("seed", "0"),
    ("steps", "20000"),
    ("variant", "uoep"),
];

/// Flat key/value experiment configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::InvalidConfig(format!("{key} = {v:?} is not a valid value")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("{key} = {v:?} is not a valid list")))
            })
            .collect()
    }

    /// The resolved configuration, one `key = value` per line in key order.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    pub fn ablation(&self) -> Result<Option<Ablation>> {
        Ablation::parse(self.get("ablation"))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let grouping = match self.get("grouping") {
            "nested" => Grouping::Nested,
            "disjoint" => Grouping::Disjoint,
            other => return Err(Error::InvalidConfig(format!("grouping must be nested or disjoint, got {other:?}"))),
        };
        let horizon = match self.get("horizon") {
            "auto" => None,
            _ => Some(self.parsed("horizon")?),
        };
        let base = TrainConfig {
            total_steps: self.parsed("steps")?,
            batch_size: self.parsed("batch_size")?,
            gamma: self.parsed("gamma")?,
            n_quantiles: self.parsed("n_quantiles")?,
            n_target_quantiles: self.parsed("n_target_quantiles")?,
            k_cvar: self.parsed("k_cvar")?,
            k_infer: self.parsed("k_infer")?,
            kappa: self.parsed("kappa")?,
            mu: self.parsed("mu")?,
            actor_lr: self.parsed("actor_lr")?,
            critic_lr: self.parsed("critic_lr")?,
            critic_hidden: self.list("critic_hidden")?,
            actor_hidden: self.list("actor_hidden")?,
            eval_interval: self.parsed("eval_interval")?,
            eval_episodes: self.parsed("eval_episodes")?,
            seed: self.seed()?,
            alphas: self.list("alphas")?,
            beta: self.parsed("beta")?,
            horizon,
            length_scale: self.parsed("length_scale")?,
            jitter: self.parsed("jitter")?,
            noise: self.parsed("noise")?,
            lambda: self.parsed("lambda")?,
            bandit_window: self.parsed("bandit_window")?,
            replay_capacity: self.parsed("replay_capacity")?,
            deterministic_critic: false,
            no_div: false,
            no_sta: false,
            grouping,
        };
        let config = match self.get("variant") {
            "uoep" => base.with_ablation(self.ablation()?),
            "baseline" => {
                if self.ablation()?.is_some() {
                    return Err(Error::InvalidConfig("the baseline takes no ablation flags".into()));
                }
                base.baseline()
            }
            other => return Err(Error::InvalidConfig(format!("variant must be uoep or baseline, got {other:?}"))),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn session_config(&self) -> Result<SessionConfig> {
        Ok(SessionConfig {
            list_size: self.parsed("list_size")?,
            max_depth: self.parsed("max_depth")?,
            initial_temper: self.parsed("initial_temper")?,
            history_window: self.parsed("history_window")?,
            ..SessionConfig::default()
        })
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        Ok(EnvConfig {
            users: self.parsed("env_users")?,
            items: self.parsed("env_items")?,
            dim: self.parsed("env_dim")?,
            heterogeneity: self.parsed("env_heterogeneity")?,
            seed: self.parsed("env_seed")?,
            session: self.session_config()?,
        })
    }

    /// Builds the environment named by the `env` key: `synthetic` or
    /// `csv:<path>` (an interaction log that a response model is fitted to).
    pub fn environment(&self) -> Result<Environment> {
        let source = self.get("env");
        if source == "synthetic" {
            return self.env_config()?.build();
        }
        match source.strip_prefix("csv:") {
            Some(path) => {
                let fit = LogFitConfig {
                    epochs: self.parsed("log_fit_epochs")?,
                    seed: self.parsed("env_seed")?,
                    ..LogFitConfig::default()
                };
                load_interaction_log(Path::new(path), &fit)?.into_environment(self.session_config()?)
            }
            None => Err(Error::InvalidConfig(format!("env must be synthetic or csv:<path>, got {source:?}"))),
        }
    }
}

/// Streams `metrics.jsonl` and `curves.csv`.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    curves: csv::Writer<File>,
    actors: usize,
}

impl MetricsWriter {
    pub fn create(dir: &Path, actors: usize) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let jsonl = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        let mut curves = csv::Writer::from_path(dir.join(CURVES_FILE)).map_err(csv_io)?;
        let header: Vec<String> = std::iter::once("step".to_string())
            .chain((0..actors).map(|i| format!("actor_{i}")))
            .collect();
        curves.write_record(&header).map_err(csv_io)?;
        curves.flush()?;
        Ok(Self { jsonl, curves, actors })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, record)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        let mut row = vec![record.step.to_string()];
        for i in 0..self.actors {
            row.push(
                record
                    .per_actor_mean_return
                    .get(i)
                    .copied()
                    .flatten()
                    .map_or_else(String::new, |v| v.to_string()),
            );
        }
        self.curves.write_record(&row).map_err(csv_io)?;
        self.curves.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes a whole record stream at once.
pub fn emit_metrics(records: &[MetricsRecord], actors: usize, dir: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(dir, actors)?;
    records.iter().try_for_each(|r| w.write(r))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub final_mean_reward: Option<f64>,
}

/// Trains one configuration into `dir` with the standard run layout.
pub fn run_training(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let train = cfg.train_config()?;
    let env = cfg.environment()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.snapshot())?;
    fs::write(dir.join(SEED_FILE), format!("seed = {}\n", train.seed))?;
    let mut writer = MetricsWriter::create(dir, train.alphas.len())?;
    let checkpoint = dir.join(CHECKPOINT_DIR);
    let mut trainer = Trainer::new(train, env)?;
    trainer.save_checkpoint(&checkpoint)?;
    fs::write(checkpoint.join(CONFIG_FILE), cfg.snapshot())?;
    trainer.run(|t, rec| {
        writer.write(rec)?;
        t.save_checkpoint(&checkpoint)
    })?;
    trainer.save_checkpoint(&checkpoint)?;
    let records = trainer.records().to_vec();
    Ok(RunSummary {
        dir: dir.to_owned(),
        final_mean_reward: records.last().and_then(|r| r.total_reward_mean),
        records,
    })
}

#[derive(Parser, Debug)]
#[command(name = "uoep", about = "User-oriented exploration laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Population size; quantile levels become {1/m, …, 1}.
    #[arg(long)]
    m: Option<usize>,
    /// Comma-separated ascending quantile levels.
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// det-critic, no-div, no-sta, disjoint; no-div+no-sta removes both regularizers.
    #[arg(long)]
    ablation: Option<String>,
    /// `synthetic` or `csv:<path>`.
    #[arg(long)]
    env: Option<String>,
    /// Any other config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(v) = self.seed {
            cfg.set("seed", &v.to_string())?;
        }
        if let Some(v) = self.steps {
            cfg.set("steps", &v.to_string())?;
        }
        match (self.m, &self.alphas) {
            (Some(_), Some(_)) => return Err(Error::InvalidConfig("give either --m or --alphas, not both".into())),
            (Some(m), None) => cfg.set("alphas", &join(&PopulationConfig::even_alphas(m)))?,
            (None, Some(a)) => cfg.set("alphas", a)?,
            (None, None) => {}
        }
        if let Some(v) = self.beta {
            cfg.set("beta", &v.to_string())?;
        }
        if let Some(v) = self.lambda {
            cfg.set("lambda", &v.to_string())?;
        }
        if let Some(v) = self.noise {
            cfg.set("noise", &v.to_string())?;
        }
        if let Some(v) = &self.ablation {
            cfg.set("ablation", v)?;
        }
        if let Some(v) = &self.env {
            cfg.set("env", v)?;
        }
        cfg.train_config()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--out is required".into()))
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic population checkpoint and a matching interaction log.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Rows in the synthesized interaction log.
        #[arg(long, default_value_t = 20_000)]
        rows: usize,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained run directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the full model and ablation variants side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Train population sizes m = 2..=6.
    SweepM {
        #[command(flatten)]
        common: Common,
    },
    /// Train the single-actor baseline on low-activity user groups under
    /// several exploration noise levels.
    GroupNoiseStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        #[arg(long, default_value = "0.2,0.4,0.6,0.8,1.0")]
        groups: String,
        #[arg(long, default_value = "0.1,0.2,0.3,0.4")]
        noises: String,
    },
    /// Dump (τ, Z) curves of every actor's action at sampled states.
    ProbeQuantiles {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 8)]
        states: usize,
    },
    /// Dump every actor's action vectors at sampled states.
    DumpActions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 64)]
        states: usize,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, rows } => gen_data(&common, rows),
        Command::Train { common } => {
            let cfg = common.resolve()?;
            let summary = run_training(&cfg, common.out()?)?;
            println!(
                "trained {} evaluations into {}; last mean total reward {}",
                summary.records.len(),
                summary.dir.display(),
                fmt_opt(summary.final_mean_reward)
            );
            Ok(())
        }
        Command::Evaluate { common, run, episodes } => evaluate_run(&common, &run, episodes),
        Command::Ablate { common } => ablate(&common),
        Command::SweepM { common } => sweep_m(&common),
        Command::GroupNoiseStudy {
            common,
            seeds,
            groups,
            noises,
        } => group_noise_study(&common, seeds, &groups, &noises),
        Command::ProbeQuantiles { common, run, states } => probe_quantiles(&common, &run, states),
        Command::DumpActions { common, run, states } => dump_actions(&common, &run, states),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".into(), |x| format!("{x:.4}"))
}

fn gen_data(common: &Common, rows: usize) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out()?;
    fs::create_dir_all(out)?;
    let env = cfg.env_config()?.build()?;
    write_population(&out.join("population.bin"), env.users(), env.catalog())?;
    let log = synthesize_log(&env, rows, cfg.seed()?);
    write_interaction_log(&out.join("interactions.csv"), &log)?;
    fs::write(out.join(CONFIG_FILE), cfg.snapshot())?;
    println!("wrote {} users, {} items, {rows} log rows to {}", env.users().len(), env.catalog().len(), out.display());
    Ok(())
}

/// Loads the configuration, environment and networks of a run directory.
fn load_run(run: &Path) -> Result<(ExperimentConfig, TrainConfig, Environment, crate::population::Population, crate::critic::CriticNet)> {
    let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
    let train = cfg.train_config()?;
    let env = cfg.environment()?;
    let (population, critic, _) = load_checkpoint(&run.join(CHECKPOINT_DIR), &train, env.state_dim(), env.catalog().dim())?;
    Ok((cfg, train, env, population, critic))
}

fn evaluate_run(common: &Common, run: &Path, episodes: Option<usize>) -> Result<()> {
    let (_, train, env, population, critic) = load_run(run)?;
    let seed = common.seed.unwrap_or(train.seed);
    let report = evaluate(&population, &critic, &env, episodes.unwrap_or(train.eval_episodes), train.k_infer, seed)?;
    let record = MetricsRecord::from_report(&report, env.catalog().len(), env.catalog().categories());
    let line = serde_json::to_string(&record)?;
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("evaluation.jsonl"), format!("{line}\n"))?;
    }
    println!("{line}");
    Ok(())
}

fn write_summary(path: &Path, rows: &[(String, RunSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["run", "evaluations", "final_total_reward_mean", "final_cvar_0_3", "final_gini"])
        .map_err(csv_io)?;
    for (name, s) in rows {
        let last = s.records.last();
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        w.write_record([
            name.clone(),
            s.records.len().to_string(),
            opt(s.final_mean_reward),
            opt(last.and_then(|r| r.cvar_0_3)),
            opt(last.and_then(|r| r.gini)),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let base = common.resolve()?;
    let out = common.out()?;
    let variants: Vec<Option<Ablation>> = match base.ablation()? {
        Some(a) => vec![None, Some(a)],
        None => vec![
            None,
            Some(Ablation::DetCritic),
            Some(Ablation::NoDiv),
            Some(Ablation::NoSta),
            Some(Ablation::NoReg),
            Some(Ablation::Disjoint),
        ],
    };
    let mut rows = Vec::new();
    for v in variants {
        let name = v.map_or("full", Ablation::name).to_string();
        let mut cfg = base.clone();
        cfg.set("ablation", v.map_or("none", Ablation::name))?;
        let s = run_training(&cfg, &out.join(&name))?;
        println!("{name}: final mean total reward {}", fmt_opt(s.final_mean_reward));
        rows.push((name, s));
    }
    write_summary(&out.join("summary.csv"), &rows)
}

fn sweep_m(common: &Common) -> Result<()> {
    let base = common.resolve()?;
    let out = common.out()?;
    let mut rows = Vec::new();
    for m in 2..=6 {
        let mut cfg = base.clone();
        cfg.set("alphas", &join(&PopulationConfig::even_alphas(m)))?;
        let name = format!("m{m}");
        let s = run_training(&cfg, &out.join(&name))?;
        println!("m = {m}: final mean total reward {}", fmt_opt(s.final_mean_reward));
        rows.push((name, s));
    }
    write_summary(&out.join("summary.csv"), &rows)
}

fn parse_levels(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} list {text:?}")))
        })
        .collect()
}

/// Mean greedy return of the baseline trained and evaluated on one user group.
pub fn group_noise_cell(cfg: &ExperimentConfig, group: &[usize], noise: f64, seed: u64) -> Result<f64> {
    let mut train = cfg.train_config()?.baseline();
    train.noise = noise;
    train.seed = seed;
    let env = cfg.environment()?.restricted_to(group)?;
    let mut trainer = Trainer::new(train, env)?;
    trainer.run(|_, _| Ok(()))?;
    let report = trainer.evaluate_now(trainer.config().eval_episodes)?;
    metrics::mean(&report.total_rewards)
}

/// The lowest-activity `⌈α·n⌉` users.
pub fn bottom_group(env: &Environment, alpha: f64) -> Vec<usize> {
    let order = env.users_by_activity();
    let k = ((alpha * order.len() as f64 - 1e-9).ceil() as usize).clamp(1, order.len());
    order[..k].to_vec()
}

fn group_noise_study(common: &Common, seeds: u64, groups: &str, noises: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let out = common.out()?;
    let groups = parse_levels(groups, "group")?;
    let noises = parse_levels(noises, "noise")?;
    if seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be positive".into()));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.snapshot())?;
    let env = cfg.environment()?;
    let base_seed = cfg.seed()?;
    let mut cells = csv::Writer::from_path(out.join("cells.csv")).map_err(csv_io)?;
    cells.write_record(["group_alpha", "noise", "seed", "mean_total_reward"]).map_err(csv_io)?;
    let mut matrix = csv::Writer::from_path(out.join("matrix.csv")).map_err(csv_io)?;
    let header: Vec<String> = std::iter::once("group_alpha".to_string())
        .chain(noises.iter().map(|n| format!("noise_{n}")))
        .collect();
    matrix.write_record(&header).map_err(csv_io)?;
    for &g in &groups {
        let group = bottom_group(&env, g);
        let mut row = vec![g.to_string()];
        for &noise in &noises {
            let mut values = Vec::new();
            for s in 0..seeds {
                let v = group_noise_cell(&cfg, &group, noise, base_seed + s)?;
                cells
                    .write_record([g.to_string(), noise.to_string(), (base_seed + s).to_string(), v.to_string()])
                    .map_err(csv_io)?;
                values.push(v);
            }
            let m = metrics::mean(&values)?;
            println!("group {g} noise {noise}: mean return {m:.4}");
            row.push(m.to_string());
        }
        matrix.write_record(&row).map_err(csv_io)?;
    }
    cells.flush()?;
    matrix.flush()?;
    Ok(())
}

/// Start-of-session states of users drawn with the evaluation seed.
fn probe_states(env: &Environment, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = crate::rng::stream(seed, crate::rng::streams::EVAL);
    (0..count).map(|_| env.encode_state(&env.sample_session(&mut rng))).collect()
}

fn probe_quantiles(common: &Common, run: &Path, count: usize) -> Result<()> {
    let (_, train, env, population, critic) = load_run(run)?;
    let out = common.out.clone().unwrap_or_else(|| run.join("quantiles.csv"));
    let taus: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    let mut w = csv::Writer::from_path(&out).map_err(csv_io)?;
    w.write_record(["state", "actor", "alpha", "tau", "z"]).map_err(csv_io)?;
    for (si, state) in probe_states(&env, count, common.seed.unwrap_or(train.seed)).iter().enumerate() {
        for actor in population.actors() {
            let action = actor.action(state)?;
            let z = critic.quantiles(state, &action, &taus)?;
            for (t, v) in taus.iter().zip(&z) {
                w.write_record([si.to_string(), actor.index().to_string(), actor.alpha().to_string(), t.to_string(), v.to_string()])
                    .map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    println!("wrote {}", out.display());
    Ok(())
}

fn dump_actions(common: &Common, run: &Path, count: usize) -> Result<()> {
    let (_, train, env, population, _) = load_run(run)?;
    let out = common.out.clone().unwrap_or_else(|| run.join("actions.csv"));
    let states = probe_states(&env, count, common.seed.unwrap_or(train.seed));
    let states = Matrix::from_rows(&states)?;
    let dim = env.catalog().dim();
    let mut w = csv::Writer::from_path(&out).map_err(csv_io)?;
    let header: Vec<String> = ["actor_id".to_string(), "state".to_string()]
        .into_iter()
        .chain((0..dim).map(|i| format!("a_{i}")))
        .collect();
    w.write_record(&header).map_err(csv_io)?;
    for actor in population.actors() {
        let actions = actor.actions(&states)?;
        for r in 0..actions.rows() {
            let row: Vec<String> = [actor.index().to_string(), r.to_string()]
                .into_iter()
                .chain(actions.row(r).iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_snapshot() {
        let cfg = ExperimentConfig::parse("# comment\nsteps = 10 # trailing\n\nnoise=0.3\n").unwrap();
        assert_eq!(cfg.get("steps"), "10");
        assert_eq!(cfg.get("noise"), "0.3");
        let again = ExperimentConfig::parse(&cfg.snapshot()).unwrap();
        assert_eq!(again, cfg);
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("steps").is_err());
    }

    #[test]
    fn defaults_resolve_to_table_values() {
        let t = ExperimentConfig::default().train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
    }

    #[test]
    fn baseline_variant() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("variant", "baseline").unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.alphas, vec![1.0]);
        assert!(t.deterministic_critic);
        cfg.set("ablation", "no-div").unwrap();
        assert!(cfg.train_config().is_err());
    }

    #[test]
    fn bottom_groups_nest() {
        let env = EnvConfig {
            users: 10,
            items: 20,
            dim: 4,
            ..EnvConfig::default()
        }
        .build()
        .unwrap();
        assert_eq!(bottom_group(&env, 0.2).len(), 2);
        assert_eq!(bottom_group(&env, 1.0).len(), 10);
        let small = bottom_group(&env, 0.4);
        assert!(small.iter().all(|u| bottom_group(&env, 0.6).contains(u)));
    }
}

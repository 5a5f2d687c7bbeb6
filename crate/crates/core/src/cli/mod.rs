//! The `kdmtl` command line: one TOML config per run, five subcommands.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{
    default_root, DatasetSection, ExperimentConfig, GeneratorConfig, ModelSection, OutputSection, SweepSection,
    TaskEntry, OUTPUT_ROOT_ENV, SNAPSHOT,
};
pub use report::{build_report, Report, ReportRow};

use crate::data::{load_dataset, save_dataset, split_train_val, MultiTaskDataset};
use crate::error::Error;
use crate::losses::Teachers;
use crate::models::{load_checkpoint, save_checkpoint, ModelBundle, TaskSpec};
use crate::pipeline::{
    lambda_sweep, train_multitask, train_single_task, write_metrics, Method, RunRecord, RunSummary,
};

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "kdmtl", version, about = "Multi-task training with per-task teacher distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured synthetic dataset and print its hash.
    Gen(RunArgs),
    /// Train one single-task teacher per task.
    TrainSingle(RunArgs),
    /// Train a multi-task student with the configured method.
    TrainMtl(RunArgs),
    /// Pick lambda on a held-out split, then retrain on the full training set.
    Sweep(RunArgs),
    /// Tabulate finished runs and merge their training curves.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory (default `$KDMTL_OUTPUT_ROOT/report` or `runs/report`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Overrides `train.seed` (the generator seed for `gen`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn data(message: String) -> Self {
        Self {
            code: exit::DATA,
            message,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => exit::CONFIG,
            Error::Io(_)
            | Error::Format(_)
            | Error::MissingTeacher(_)
            | Error::UnknownTask(_)
            | Error::LabelOutOfRange { .. } => exit::DATA,
            Error::Divergence(_) | Error::NonFinite(_) => exit::DIVERGENCE,
            _ => exit::OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Contents of `summary.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub name: String,
    pub method: Method,
    pub adaptor: String,
    pub param_count: usize,
    pub dataset_hash: String,
    pub tasks: Vec<TaskSpec>,
    pub summary: RunSummary,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::TrainSingle(a) => cmd_train_single(&a),
        Command::TrainMtl(a) => cmd_train_mtl(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Report { runs, out } => cmd_report(&runs, out.unwrap_or_else(|| default_root().join("report"))),
    }
}

fn load_config(a: &RunArgs, for_gen: bool) -> CliResult<ExperimentConfig> {
    Ok(ExperimentConfig::load(&a.config)?.resolve(a.seed, a.out.clone(), for_gen))
}

pub fn cmd_gen(a: &RunArgs) -> CliResult {
    let cfg = load_config(a, true)?;
    let generator = cfg
        .dataset
        .generator
        .as_ref()
        .ok_or_else(|| Error::Config("gen needs a [dataset.generator] section".into()))?;
    let ds = generator.generate().map_err(|e| Error::Config(format!("dataset.generator: {e}")))?;
    let path = cfg.dataset_path();
    save_dataset(&ds, &path)?;
    cfg.write_snapshot(path.parent().unwrap_or(Path::new(".")))?;
    println!("{}  {}", ds.hash(), path.display());
    Ok(())
}

/// Loads the dataset, checks it against the generator section and splits it.
fn prepare(cfg: &ExperimentConfig) -> CliResult<(MultiTaskDataset, MultiTaskDataset, MultiTaskDataset)> {
    let path = cfg.dataset_path();
    if !path.is_file() {
        return Err(Failure::data(format!(
            "dataset {} not found; run `kdmtl gen` with this config first",
            path.display()
        )));
    }
    let ds = load_dataset(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    if let Some(g) = &cfg.dataset.generator {
        let expected = g.generate().map_err(|e| Error::Config(format!("dataset.generator: {e}")))?;
        if expected.hash() != ds.hash() {
            return Err(Failure::data(format!(
                "dataset {} does not match [dataset.generator]; rerun `kdmtl gen`",
                path.display()
            )));
        }
    }
    let (train, val) = split_train_val(&ds, cfg.dataset.val_fraction, cfg.dataset.split_seed)
        .map_err(|e| Error::Config(format!("dataset.val_fraction: {e}")))?;
    Ok((ds, train, val))
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    method: Method,
    dataset_hash: &str,
    tasks: &[TaskSpec],
    model: &ModelBundle,
    record: &RunRecord,
) -> CliResult<RunInfo> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    save_checkpoint(model, &dir.join(CHECKPOINT))?;
    write_metrics(record, &dir.join(METRICS))?;
    let info = RunInfo {
        name: cfg.name.clone(),
        method,
        adaptor: model.adaptor_kind().as_str().to_string(),
        param_count: model.param_count(),
        dataset_hash: dataset_hash.to_string(),
        tasks: tasks.to_vec(),
        summary: record.summary(tasks)?,
    };
    let mut json = serde_json::to_string_pretty(&info).map_err(Error::from)?;
    json.push('\n');
    fs::write(dir.join(SUMMARY), json).map_err(Error::from)?;
    cfg.write_snapshot(dir)?;
    Ok(info)
}

fn summary_line(label: &str, info: &RunInfo) -> String {
    let parts: Vec<String> = info
        .summary
        .tasks
        .iter()
        .map(|(t, s)| format!("{t}={:.6}", s.final_metric))
        .collect();
    format!("{label}: {}", parts.join(" "))
}

pub fn cmd_train_single(a: &RunArgs) -> CliResult {
    let mut cfg = load_config(a, false)?;
    let (ds, train, val) = prepare(&cfg)?;
    let specs = cfg.task_specs(&ds)?;
    cfg.pin_tasks(&specs);
    let encoder = cfg.encoder(&ds)?;
    let mut tcfg = cfg.train.clone();
    tcfg.method = Method::Stl;
    let hash = ds.hash();
    for spec in &specs {
        let (model, record) = train_single_task(spec, &train, &val, &encoder, &tcfg)?;
        let dir = cfg.out_dir().join(format!("stl-{}", spec.id));
        let mut stl_spec = spec.clone();
        stl_spec.lambda = 0.0;
        let info = write_run(&dir, &cfg, Method::Stl, &hash, &[stl_spec], &model, &record)?;
        println!("{}", summary_line(&dir.display().to_string(), &info));
    }
    Ok(())
}

fn load_teachers(cfg: &ExperimentConfig, specs: &[TaskSpec]) -> CliResult<Teachers> {
    let root = cfg.teachers_dir();
    let mut teachers = Teachers::new();
    for spec in specs {
        let path = root.join(format!("stl-{}", spec.id)).join(CHECKPOINT);
        if !path.is_file() {
            return Err(Failure::data(format!(
                "method kd needs a teacher for task `{}` at {}; run `kdmtl train-single` with this config first \
                 (or set output.teachers)",
                spec.id,
                path.display()
            )));
        }
        let t = load_checkpoint(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        if !t.is_frozen() || t.task(&spec.id).is_err() {
            return Err(Failure::data(format!(
                "{} is not a frozen teacher for task `{}`",
                path.display(),
                spec.id
            )));
        }
        teachers.insert(spec.id.clone(), t);
    }
    Ok(teachers)
}

pub fn cmd_train_mtl(a: &RunArgs) -> CliResult {
    let mut cfg = load_config(a, false)?;
    let method = cfg.train.method;
    if method == Method::Stl {
        return Err(Error::Config("method stl is trained by `kdmtl train-single`".into()).into());
    }
    let (ds, train, val) = prepare(&cfg)?;
    let specs = cfg.task_specs(&ds)?;
    cfg.pin_tasks(&specs);
    let encoder = cfg.encoder(&ds)?;
    let teachers = if method == Method::Kd {
        Some(load_teachers(&cfg, &specs)?)
    } else {
        None
    };
    let (model, record) = train_multitask(&specs, &train, &val, &encoder, &cfg.train, teachers.as_ref(), None)?;
    let dir = cfg.out_dir().join(method.as_str());
    let info = write_run(&dir, &cfg, method, &ds.hash(), &specs, &model, &record)?;
    println!("{}", summary_line(&dir.display().to_string(), &info));
    Ok(())
}

pub fn cmd_sweep(a: &RunArgs) -> CliResult {
    let mut cfg = load_config(a, false)?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("sweep needs a [sweep] section with a lambda grid".into()))?;
    if cfg.train.method != Method::Kd {
        return Err(Error::Config(format!("sweep tunes kd lambdas; train.method is {}", cfg.train.method)).into());
    }
    let (ds, train, val) = prepare(&cfg)?;
    let specs = cfg.task_specs(&ds)?;
    cfg.pin_tasks(&specs);
    let encoder = cfg.encoder(&ds)?;
    let teachers = load_teachers(&cfg, &specs)?;
    let outcome = lambda_sweep(&specs, &train, &val, &encoder, &cfg.train, &teachers, &sweep.grid, sweep.mode)?;
    let chosen: Vec<TaskSpec> = specs
        .iter()
        .map(|t| t.clone().with_weights(t.w, outcome.best_lambdas()[&t.id]))
        .collect();
    let dir = cfg.out_dir().join("sweep");
    let info = write_run(&dir, &cfg, Method::Kd, &ds.hash(), &chosen, &outcome.model, &outcome.record)?;
    fs::write(dir.join("sweep.csv"), outcome.report_csv(&specs)?).map_err(Error::from)?;
    let lambdas: BTreeMap<&str, f64> = chosen.iter().map(|t| (t.id.as_str(), t.lambda)).collect();
    let best = &outcome.trials[outcome.best];
    println!(
        "chosen trial {} lambdas {:?} validation score {:.6} ({} trials)",
        outcome.best,
        lambdas,
        best.score,
        outcome.trials.len()
    );
    println!("{}", summary_line(&dir.display().to_string(), &info));
    Ok(())
}

pub fn cmd_report(runs: &[PathBuf], out: PathBuf) -> CliResult {
    let report = build_report(runs, |w| eprintln!("warning: {w}"))?;
    fs::create_dir_all(&out).map_err(Error::from)?;
    fs::write(out.join("report.csv"), report.to_csv()?).map_err(Error::from)?;
    let text = report.to_text();
    fs::write(out.join("report.txt"), &text).map_err(Error::from)?;
    fs::write(out.join("curves.csv"), report.curves.clone()).map_err(Error::from)?;
    let mut inputs = String::from("runs = [\n");
    for r in &report.rows {
        inputs.push_str(&format!("    {:?},\n", r.dir.display().to_string()));
    }
    inputs.push_str("]\n");
    fs::write(out.join(SNAPSHOT), inputs).map_err(Error::from)?;
    print!("{text}");
    Ok(())
}

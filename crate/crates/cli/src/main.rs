//! `ebsaea` command-line tool.
//!
//! Exit codes: 0 on success, 2 on configuration, schema or I/O errors,
//! 3 on numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ebsaea::bench::{
    read_records, run_experiment, summarize, train_experiences, write_experiences, write_run, Experiment,
    ExperimentConfig, RunOutcome, Summary,
};
use ebsaea::error::{Error, Result};
use ebsaea::meta::load_experience_set;
use ebsaea::optimize::{run_framework, OptimizerConfig};
use ebsaea::tasks::{canonical_dtlz, Family, Regime, TaskSpec};
use serde::Deserialize;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "ebsaea", version, about = "Experience-based surrogate-assisted optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train experience stores for an experiment's related tasks.
    MetaTrain(Common),
    /// Run a single optimization described by a job file.
    Optimize(Common),
    /// Few-shot sinusoid regression benchmark.
    RegressBench(Common),
    /// DTLZ multi-objective benchmark.
    MooBench(Common),
    /// Constrained single-objective benchmark.
    ConsBench(Common),
    /// Recompute and print the summary of a finished benchmark directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; keys override the preset of the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_enum)]
    regime: Option<RegimeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    In,
    Out,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::In => Regime::InRange,
            RegimeArg::Out => Regime::OutOfRange,
        }
    }
}

/// Job file of `optimize`. Either `task` or a canonical DTLZ `family`
/// (with `d` and `m`) names the target.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeJob {
    #[serde(default)]
    task: Option<TaskSpec>,
    #[serde(default)]
    family: Option<Family>,
    #[serde(default)]
    d: Option<usize>,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    optimizer: OptimizerConfig,
    #[serde(default)]
    experiences: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::MetaTrain(c) => meta_train_cmd(&c),
        Command::Optimize(c) => optimize_cmd(&c),
        Command::RegressBench(c) => bench_cmd(Experiment::SinusoidRegression, &c),
        Command::MooBench(c) => bench_cmd(Experiment::DtlzMoo, &c),
        Command::ConsBench(c) => bench_cmd(Experiment::ConstrainedSoo, &c),
        Command::Report(c) => report_cmd(&c),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset of `experiment`, overlaid with the config file, then flags.
fn experiment_config(experiment: Experiment, c: &Common, allow_other: bool) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(ExperimentConfig::preset(experiment))?;
    if let Some(path) = &c.config {
        let patch = read_json(path)?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
        }
        // A config may name its own experiment; start from that preset.
        if let Some(named) = patch.get("experiment") {
            let named: Experiment = serde_json::from_value(named.clone())?;
            if named != experiment && !allow_other {
                return Err(Error::Config(format!(
                    "config is for {}, not {}",
                    named.name(),
                    experiment.name()
                )));
            }
            value = serde_json::to_value(ExperimentConfig::preset(named))?;
        }
        merge(&mut value, patch);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.runs {
        cfg.n_runs = r;
    }
    if let Some(r) = c.regime {
        cfg.regime = r.into();
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    c.out_dir
        .as_deref()
        .ok_or_else(|| Error::Config("--out-dir is required".into()))
}

fn meta_train_cmd(c: &Common) -> Result<()> {
    let cfg = experiment_config(Experiment::DtlzMoo, c, true)?;
    let dir = out_dir(c)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let (experiences, traces) = train_experiences(&cfg)?;
    write_experiences(dir, &experiences)?;
    let trace_path = dir.join("training_trace.json");
    std::fs::write(&trace_path, serde_json::to_string_pretty(&traces)? + "\n")
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", trace_path.display())))?;
    for (ch, t) in traces.iter().enumerate() {
        println!(
            "channel {ch}: {} updates, {} skipped, final loss {:.6e}",
            t.updates,
            t.skipped,
            t.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn optimize_cmd(c: &Common) -> Result<()> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("optimize needs --config <job.json>".into()))?;
    let job: OptimizeJob = serde_json::from_value(read_json(path)?)?;
    let task = match (job.task, job.family) {
        (Some(t), None) => t,
        (None, Some(f)) => {
            let (d, m) = job
                .d
                .zip(job.m)
                .ok_or_else(|| Error::Config("a canonical target needs `d` and `m`".into()))?;
            canonical_dtlz(f, d, m)?
        }
        _ => return Err(Error::Config("job must set exactly one of `task` and `family`".into())),
    };
    let mut config = job.optimizer;
    if let Some(s) = c.seed {
        config.seed = s;
    }
    let experiences = job.experiences.as_deref().map(load_experience_set).transpose()?;
    let archive = run_framework(&task, experiences.as_deref(), &config)?;
    let dir = out_dir(c)?;
    let run = RunOutcome {
        id: format!("single-{}", config.seed),
        run: 0,
        mode: format!("{:?}", config.mode),
        seed: config.seed,
        task,
        config,
        archive,
    };
    write_run(dir, &run)?;
    println!(
        "{} evaluations, {} feasible{}",
        run.archive.fe,
        run.archive.feasible_count(),
        run.archive.aborted.as_deref().map(|r| format!(", aborted: {r}")).unwrap_or_default()
    );
    Ok(())
}

fn bench_cmd(experiment: Experiment, c: &Common) -> Result<()> {
    let cfg = experiment_config(experiment, c, false)?;
    if cfg.out_dir.is_none() {
        return Err(Error::Config("--out-dir is required".into()));
    }
    let results = run_experiment(&cfg)?;
    print_summary(&results.summary);
    Ok(())
}

fn report_cmd(c: &Common) -> Result<()> {
    let dir = out_dir(c)?;
    let saved: Summary = serde_json::from_value(read_json(&dir.join("summary.json"))?)?;
    let records = read_records(&dir.join("results.csv"))?;
    let mut summary = summarize(&records, saved.experiment, saved.regime, &saved.metric);
    summary.eb_budget = saved.eb_budget;
    summary.baseline_budget = saved.baseline_budget;
    print_summary(&summary);
    Ok(())
}

fn print_summary(s: &Summary) {
    println!("{} ({:?}), metric {}", s.experiment.name(), s.regime, s.metric);
    println!("{:<16} {:<9} {:>4} {:>13} {:>13} {:>13}", "group", "mode", "n", "mean", "std", "median");
    for r in &s.rows {
        println!(
            "{:<16} {:<9} {:>4} {:>13.6e} {:>13.6e} {:>13.6e}",
            r.group, r.mode, r.n, r.mean, r.std, r.median
        );
    }
    for cmp in &s.comparisons {
        let p = cmp.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<16} {:<5} p = {p}", cmp.group, cmp.outcome);
    }
    let (w, t, l) = s.win_tie_loss;
    println!("win/tie/loss {w}/{t}/{l}");
}

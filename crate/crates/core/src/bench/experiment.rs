//! Desk-scale experiment protocols: few-shot sinusoid regression, DTLZ
//! multi-objective optimization and constrained single-objective
//! optimization, each comparing the experience-based surrogate against a
//! plain GP on shared data.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{igd_plus, mean_std, nmse, pf_reference, wilcoxon_rank_sum, ReferenceSet};
use crate::adapt::{AdaptConfig, Surrogate};
use crate::error::{Error, Result};
use crate::gp::{fit_mle_gp, Dataset, MleConfig};
use crate::meta::{
    load_experience_set, meta_train, save_experience_set, save_experiences, ExperienceParams, MetaConfig, TrainingTrace,
};
use crate::numkit::{median, uniform_sample, RngStream};
use crate::optimize::{run_framework, Archive, Backend, Mode, OptimizerConfig, RunManifest};
use crate::tasks::{
    canonical_dtlz, eval_sinusoid, generate_dataset, sample_constrained, sample_sinusoid, sample_task, Family, Regime,
    Sampling, TaskSpec,
};

const RELATED_STREAM: u64 = 0x7265_6c61;
const META_SEED_STREAM: u64 = 0x6d73_6565;
const RUN_STREAM: u64 = 0x7275_6e73;
const TARGET_STREAM: u64 = 0x7461_7267;
const REFERENCE_STREAM: u64 = 0x7265_6673;

pub const MODE_EB: &str = "eb";
pub const MODE_BASELINE: &str = "baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SinusoidRegression,
    DtlzMoo,
    ConstrainedSoo,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SinusoidRegression => "sinusoid-regression",
            Experiment::DtlzMoo => "dtlz-moo",
            Experiment::ConstrainedSoo => "constrained-soo",
        }
    }
}

/// Evaluation budget of one optimizer mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub n_init: usize,
    pub fe_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub regime: Regime,
    /// DTLZ family of the targets and related tasks.
    pub family: Family,
    pub d: usize,
    pub m: usize,
    /// Number of distinct related tasks (`N`).
    pub n_related: usize,
    /// Datasets consumed by meta-training (`N_m`).
    pub n_meta: usize,
    pub dm_size: usize,
    pub batch: usize,
    pub lr_alpha: f64,
    pub n_runs: usize,
    pub seed: u64,
    /// Support sizes of the regression experiment.
    pub support_sizes: Vec<usize>,
    pub query_points: usize,
    /// Nugget shared by both regression models; noisy datasets raise it to
    /// their known noise level.
    pub nugget: f64,
    pub eb_budget: Budget,
    pub baseline_budget: Budget,
    /// Settings shared by both optimizer modes; budget, mode and seed are
    /// filled in per run.
    pub optimizer: OptimizerConfig,
    pub adapt: AdaptConfig,
    pub mle: MleConfig,
    pub reference_points: usize,
    /// Runs the baseline arm of the optimization protocols.
    pub include_baseline: bool,
    /// Pre-trained experiences; skips meta-training when set.
    pub experiences: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Experiment::DtlzMoo)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults of each protocol.
    pub fn preset(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            regime: Regime::InRange,
            family: Family::Dtlz2,
            d: 10,
            m: 3,
            n_related: 500,
            n_meta: 20_000,
            dm_size: 20,
            batch: 10,
            lr_alpha: 0.001,
            n_runs: 10,
            seed: 0,
            support_sizes: vec![2, 3, 5, 10, 20, 30],
            query_points: 100,
            nugget: crate::gp::DEFAULT_NUGGET,
            eb_budget: Budget { n_init: 10, fe_max: 40 },
            baseline_budget: Budget { n_init: 60, fe_max: 90 },
            optimizer: OptimizerConfig::default(),
            adapt: AdaptConfig::default(),
            mle: MleConfig::default(),
            reference_points: 5000,
            include_baseline: true,
            experiences: None,
            out_dir: None,
        };
        match experiment {
            Experiment::SinusoidRegression => ExperimentConfig {
                family: Family::Sinusoid,
                d: 1,
                m: 1,
                n_related: 2000,
                n_meta: 2000,
                dm_size: 10,
                // one dataset per update keeps 2000 updates at N_m = 2000
                batch: 1,
                n_runs: 30,
                ..base
            },
            Experiment::DtlzMoo => base,
            Experiment::ConstrainedSoo => ExperimentConfig {
                family: Family::ConstrainedSynthetic,
                d: 6,
                m: 1,
                n_related: 200,
                dm_size: 12,
                eb_budget: Budget { n_init: 6, fe_max: 30 },
                baseline_budget: Budget { n_init: 24, fe_max: 48 },
                optimizer: OptimizerConfig {
                    backend: Backend::ConsEgo,
                    batch_q: 1,
                    ..OptimizerConfig::default()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.n_related == 0 {
            return Err(Error::Config("n_related must be at least 1".into()));
        }
        match self.experiment {
            Experiment::SinusoidRegression => {
                if self.support_sizes.iter().any(|&s| s < 2) || self.support_sizes.is_empty() {
                    return Err(Error::Config("support sizes must be at least 2".into()));
                }
                if self.query_points < 2 {
                    return Err(Error::Config("query_points must be at least 2".into()));
                }
            }
            Experiment::DtlzMoo => {
                if !self.family.is_dtlz() {
                    return Err(Error::Config(format!("dtlz-moo needs a DTLZ family, got {}", self.family.name())));
                }
            }
            Experiment::ConstrainedSoo => {}
        }
        if self.experiment != Experiment::SinusoidRegression {
            for (name, b) in [("eb_budget", self.eb_budget), ("baseline_budget", self.baseline_budget)] {
                self.run_config(b, Mode::BaselineGp, 0)
                    .validate()
                    .map_err(|e| Error::Config(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    fn meta_config(&self, channel: usize) -> MetaConfig {
        use rand::RngCore;
        let seed = RngStream::new(self.seed, META_SEED_STREAM).substream(channel as u64).next_u64();
        MetaConfig {
            n_meta: self.n_meta,
            dm_size: self.dm_size,
            batch: self.batch,
            lr_alpha: self.lr_alpha,
            seed,
            nugget: if self.experiment == Experiment::SinusoidRegression {
                self.nugget
            } else {
                MetaConfig::default().nugget
            },
            ..MetaConfig::default()
        }
    }

    fn run_config(&self, budget: Budget, mode: Mode, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            n_init: budget.n_init,
            fe_max: budget.fe_max,
            mode,
            seed,
            adapt: self.adapt.clone(),
            mle: self.mle.clone(),
            ..self.optimizer.clone()
        }
    }
}

/// Seed of repetition `r`, shared by both modes.
pub fn run_seed(base: u64, r: usize) -> u64 {
    use rand::RngCore;
    RngStream::new(base, RUN_STREAM).substream(r as u64).next_u64()
}

/// Samples the related tasks of an experiment.
pub fn related_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    let mut rng = RngStream::new(cfg.seed, RELATED_STREAM);
    (0..cfg.n_related)
        .map(|_| sample_task(cfg.family, cfg.regime, cfg.d, cfg.m, &mut rng))
        .collect()
}

/// Per-channel meta-training datasets, `dm_size` LHS points per task
/// (uniform points for sinusoids).
pub fn related_datasets(cfg: &ExperimentConfig, tasks: &[TaskSpec]) -> Result<Vec<Vec<Dataset>>> {
    let sampling = if cfg.experiment == Experiment::SinusoidRegression {
        Sampling::Uniform
    } else {
        Sampling::Lhs
    };
    let mut rng = RngStream::new(cfg.seed, RELATED_STREAM).substream(1);
    let n_out = tasks.first().map_or(0, TaskSpec::n_outputs);
    let mut per_channel = vec![Vec::with_capacity(tasks.len()); n_out];
    for t in tasks {
        for (c, d) in generate_dataset(t, cfg.dm_size, sampling, &mut rng)?.into_iter().enumerate() {
            per_channel[c].push(d);
        }
    }
    Ok(per_channel)
}

/// Meta-trains one experience store per output channel.
pub fn train_experiences(cfg: &ExperimentConfig) -> Result<(Vec<ExperienceParams>, Vec<TrainingTrace>)> {
    let tasks = related_tasks(cfg)?;
    let per_channel = related_datasets(cfg, &tasks)?;
    let trained: Vec<(ExperienceParams, TrainingTrace)> = per_channel
        .par_iter()
        .enumerate()
        .map(|(c, sources)| meta_train(sources, &cfg.meta_config(c)))
        .collect::<Result<_>>()?;
    Ok(trained.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Support size, or the name of an optimization metric.
    pub group: String,
    pub mode: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub mode: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub group: String,
    /// `win`, `tie` or `loss` of the experience-based mode; `n/a` with fewer
    /// than three runs.
    pub outcome: String,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub regime: Regime,
    pub metric: String,
    /// Lower is better except for the feasibility counts, where higher is.
    pub rows: Vec<SummaryRow>,
    pub comparisons: Vec<Comparison>,
    pub eb_budget: Option<Budget>,
    pub baseline_budget: Option<Budget>,
    pub win_tie_loss: (usize, usize, usize),
}

/// One optimization run kept in memory for inspection.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub id: String,
    pub run: usize,
    pub mode: String,
    pub seed: u64,
    pub task: TaskSpec,
    pub config: OptimizerConfig,
    pub archive: Archive,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub summary: Summary,
    pub records: Vec<RunRecord>,
    pub traces: Vec<TrainingTrace>,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentResults {
    /// Values of one `(group, mode)` cell in run order.
    pub fn values(&self, group: &str, mode: &str) -> Vec<f64> {
        values_of(&self.records, group, mode)
    }
}

fn values_of(records: &[RunRecord], group: &str, mode: &str) -> Vec<f64> {
    let mut rs: Vec<&RunRecord> = records.iter().filter(|r| r.group == group && r.mode == mode).collect();
    rs.sort_by_key(|r| r.run);
    rs.into_iter().map(|r| r.value).collect()
}

fn higher_is_better(group: &str) -> bool {
    matches!(group, "feasible-found" | "feasible-count" | "found-feasible")
}

/// Aggregates per-run records into the summary rows and the comparison of
/// the experience-based mode against the baseline (rank-sum test at 0.05).
pub fn summarize(records: &[RunRecord], experiment: Experiment, regime: Regime, metric: &str) -> Summary {
    let mut groups: Vec<String> = Vec::new();
    for r in records {
        if !groups.contains(&r.group) {
            groups.push(r.group.clone());
        }
    }
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    let mut wtl = (0, 0, 0);
    for g in &groups {
        for mode in [MODE_EB, MODE_BASELINE] {
            let v = values_of(records, g, mode);
            if v.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&v);
            rows.push(SummaryRow {
                group: g.clone(),
                mode: mode.into(),
                n: v.len(),
                mean,
                std,
                median: median(&v),
            });
        }
        let (a, b) = (values_of(records, g, MODE_EB), values_of(records, g, MODE_BASELINE));
        let (outcome, p) = match wilcoxon_rank_sum(&a, &b) {
            Ok(t) if t.p_value < 0.05 => {
                let eb_better = (median(&a) < median(&b)) != higher_is_better(g);
                if eb_better {
                    wtl.0 += 1;
                    ("win", Some(t.p_value))
                } else {
                    wtl.2 += 1;
                    ("loss", Some(t.p_value))
                }
            }
            Ok(t) => {
                wtl.1 += 1;
                ("tie", Some(t.p_value))
            }
            Err(_) => ("n/a", None),
        };
        comparisons.push(Comparison {
            group: g.clone(),
            outcome: outcome.into(),
            p_value: p,
        });
    }
    Summary {
        experiment,
        regime,
        metric: metric.into(),
        rows,
        comparisons,
        eb_budget: None,
        baseline_budget: None,
        win_tie_loss: wtl,
    }
}

/// Runs the configured protocol: meta-training (unless experiences are
/// supplied), then `n_runs` repetitions of both modes on shared data.
/// Writes artifacts when `out_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (experiences, traces) = match &cfg.experiences {
        Some(path) => (load_experience_set(path)?, Vec::new()),
        None => train_experiences(cfg)?,
    };
    if let Some(dir) = &cfg.out_dir {
        write_experiences(dir, &experiences)?;
        write_json(&dir.join("training_trace.json"), &traces)?;
    }
    let (records, runs, metric) = match cfg.experiment {
        Experiment::SinusoidRegression => (sinusoid_runs(cfg, &experiences)?, Vec::new(), "nmse"),
        Experiment::DtlzMoo => {
            let (rec, runs) = dtlz_runs(cfg, &experiences)?;
            (rec, runs, "igd+")
        }
        Experiment::ConstrainedSoo => {
            let (rec, runs) = constrained_runs(cfg, &experiences)?;
            (rec, runs, "feasible")
        }
    };
    let mut summary = summarize(&records, cfg.experiment, cfg.regime, metric);
    if cfg.experiment != Experiment::SinusoidRegression {
        summary.eb_budget = Some(cfg.eb_budget);
        summary.baseline_budget = Some(cfg.baseline_budget);
    }
    if let Some(dir) = &cfg.out_dir {
        write_records(&dir.join("results.csv"), &records)?;
        write_json(&dir.join("summary.json"), &summary)?;
        write_json(&dir.join("config.json"), cfg)?;
        for r in &runs {
            write_run(dir, r)?;
        }
    }
    Ok(ExperimentResults {
        summary,
        records,
        traces,
        runs,
    })
}

/// A single store for one channel, an array of stores otherwise.
pub fn write_experiences(dir: &Path, experiences: &[ExperienceParams]) -> Result<()> {
    let path = dir.join("experiences.json");
    match experiences {
        [single] => save_experiences(single, &path),
        many => save_experience_set(many, &path),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `runs/<id>/{log.csv, manifest.json, updates.json}`.
pub fn write_run(dir: &Path, run: &RunOutcome) -> Result<()> {
    let run_dir = dir.join("runs").join(&run.id);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    run.archive.write_csv(run_dir.join("log.csv"))?;
    RunManifest::new(&run.config, &run.task, &run.archive).write(run_dir.join("manifest.json"))?;
    write_json(&run_dir.join("updates.json"), &run.archive.updates)
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "seed", "group", "mode", "value"])?;
    for r in records {
        w.write_record([
            r.run.to_string(),
            r.seed.to_string(),
            r.group.clone(),
            r.mode.clone(),
            format!("{:.16e}", r.value),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default().to_string();
        let parse_err = |what: &str| Error::Config(format!("{}: malformed {what} in results", path.display()));
        out.push(RunRecord {
            run: field(0).parse().map_err(|_| parse_err("run"))?,
            seed: field(1).parse().map_err(|_| parse_err("seed"))?,
            group: field(2),
            mode: field(3),
            value: field(4).parse().map_err(|_| parse_err("value"))?,
        });
    }
    Ok(out)
}

/// Few-shot regression: per run, one target sinusoid, a noiseless query
/// set and noisy support sets of each size shared by both models.
fn sinusoid_runs(cfg: &ExperimentConfig, experiences: &[ExperienceParams]) -> Result<Vec<RunRecord>> {
    let exp = experiences
        .first()
        .ok_or_else(|| Error::Config("no experience store for the regression experiment".into()))?;
    let per_run: Vec<Vec<RunRecord>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|r| -> Result<Vec<RunRecord>> {
            let seed = run_seed(cfg.seed, r);
            let mut rng = RngStream::new(seed, TARGET_STREAM);
            let target = sample_sinusoid(&mut rng);
            let query = uniform_sample(cfg.query_points, &target.bounds, &mut rng)?;
            let truth: Vec<f64> = query.iter().map(|x| eval_sinusoid(&target, x[0], None)).collect();
            let mut out = Vec::new();
            for (k, &n) in cfg.support_sizes.iter().enumerate() {
                let mut srng = rng.substream(k as u64 + 1);
                let support = generate_dataset(&target, n, Sampling::Uniform, &mut srng)?.remove(0);
                let adapt = AdaptConfig {
                    nugget: cfg.nugget,
                    ..cfg.adapt.clone()
                };
                let s = Surrogate::new(exp.clone(), adapt).adapt(&support)?;
                let pred: Vec<f64> = query.iter().map(|x| s.predict(x).expect("fitted").0).collect();
                let mle = MleConfig {
                    nugget: cfg.nugget,
                    ..cfg.mle.clone()
                };
                let (_, gp) = fit_mle_gp(&support, &mle, None)?;
                let pred_gp: Vec<f64> = query.iter().map(|x| gp.predict(x).0).collect();
                for (mode, p) in [(MODE_EB, pred), (MODE_BASELINE, pred_gp)] {
                    out.push(RunRecord {
                        run: r,
                        seed,
                        group: n.to_string(),
                        mode: mode.into(),
                        value: nmse(&p, &truth)?,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

fn optimization_pair(
    cfg: &ExperimentConfig,
    r: usize,
    target: &TaskSpec,
    experiences: &[ExperienceParams],
) -> Result<Vec<RunOutcome>> {
    let seed = run_seed(cfg.seed, r);
    let regime = match cfg.regime {
        Regime::InRange => "in",
        Regime::OutOfRange => "out",
    };
    let run = |mode: Mode, budget: Budget, exps: Option<&[ExperienceParams]>, name: &str| -> Result<RunOutcome> {
        let config = cfg.run_config(budget, mode, seed);
        let archive = run_framework(target, exps, &config)?;
        Ok(RunOutcome {
            id: format!("{name}-{regime}-{r:03}"),
            run: r,
            mode: name.into(),
            seed,
            task: target.clone(),
            config,
            archive,
        })
    };
    let mut out = vec![run(Mode::ExperienceBased, cfg.eb_budget, Some(experiences), MODE_EB)?];
    if cfg.include_baseline {
        out.push(run(Mode::BaselineGp, cfg.baseline_budget, None, MODE_BASELINE)?);
    }
    Ok(out)
}

fn dtlz_runs(cfg: &ExperimentConfig, experiences: &[ExperienceParams]) -> Result<(Vec<RunRecord>, Vec<RunOutcome>)> {
    let target = canonical_dtlz(cfg.family, cfg.d, cfg.m)?;
    let reference = pf_reference(
        cfg.family,
        cfg.m,
        cfg.reference_points,
        &mut RngStream::new(cfg.seed, REFERENCE_STREAM),
    )?;
    let pairs: Vec<Vec<RunOutcome>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|r| optimization_pair(cfg, r, &target, experiences))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for pair in pairs {
        for o in pair {
            records.push(igd_record(&reference, &o)?);
            runs.push(o);
        }
    }
    Ok((records, runs))
}

fn igd_record(reference: &ReferenceSet, o: &RunOutcome) -> Result<RunRecord> {
    Ok(RunRecord {
        run: o.run,
        seed: o.seed,
        group: "igd+".into(),
        mode: o.mode.clone(),
        value: igd_plus(reference, &o.archive.objectives())?,
    })
}

fn constrained_runs(cfg: &ExperimentConfig, experiences: &[ExperienceParams]) -> Result<(Vec<RunRecord>, Vec<RunOutcome>)> {
    let pairs: Vec<Vec<RunOutcome>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(run_seed(cfg.seed, r), TARGET_STREAM);
            let target = sample_constrained(&mut rng)?;
            optimization_pair(cfg, r, &target, experiences)
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for pair in pairs {
        for o in pair {
            let count = o.archive.feasible_count() as f64;
            for (group, value) in [
                ("feasible-found", o.archive.feasible_found() as f64),
                ("feasible-count", count),
                ("found-feasible", f64::from(u8::from(count > 0.0))),
                ("best-feasible", o.archive.best_feasible().unwrap_or(f64::INFINITY)),
            ] {
                records.push(RunRecord {
                    run: o.run,
                    seed: o.seed,
                    group: group.into(),
                    mode: o.mode.clone(),
                    value,
                });
            }
            runs.push(o);
        }
    }
    Ok((records, runs))
}

/// Number of modelled output channels, one experience store each.
pub fn n_channels(cfg: &ExperimentConfig) -> usize {
    match cfg.experiment {
        Experiment::SinusoidRegression => 1,
        Experiment::DtlzMoo => cfg.m,
        Experiment::ConstrainedSoo => 1 + crate::tasks::CONSTRAINED_COUNT,
    }
}

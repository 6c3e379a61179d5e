//! The experience-based optimization loop with a decomposition-based
//! multi-objective EGO backend and a constrained single-objective EGO
//! backend, plus the plain-GP baseline that shares every code path except
//! surrogate construction.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, Surrogate, UpdateRecord};
use crate::deepkernel::BaseKernelParams;
use crate::error::{Error, Result};
use crate::gp::{fit_mle_gp, Dataset, GpState, MleConfig};
use crate::meta::ExperienceParams;
use crate::numkit::{lhs_sample, normal_cdf, normal_pdf, simplex_lattice_weights, uniform_sample, RngStream};
use crate::tasks::TaskSpec;

const INIT_STREAM: u64 = 0x696e_6974;
const WEIGHT_STREAM: u64 = 0x7767_6874;
const PROPOSE_STREAM: u64 = 0x7072_6f70;
/// Proposals closer than this (in the unit-scaled box) count as duplicates.
pub const MIN_DISTANCE: f64 = 1e-6;
/// Exclusion radius used when a proposal has to be re-optimized.
const RETRY_RADIUS: f64 = 1e-2;
const RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    MoeadEgo,
    ConsEgo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ExperienceBased,
    BaselineGp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub backend: Backend,
    pub fe_max: usize,
    pub n_init: usize,
    pub batch_q: usize,
    pub weights_h: usize,
    pub inner_pop: usize,
    pub inner_gens: usize,
    pub mode: Mode,
    pub seed: u64,
    pub adapt: AdaptConfig,
    pub mle: MleConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            backend: Backend::MoeadEgo,
            fe_max: 60,
            n_init: 10,
            batch_q: 5,
            weights_h: 12,
            inner_pop: 40,
            inner_gens: 60,
            mode: Mode::ExperienceBased,
            seed: 0,
            adapt: AdaptConfig::default(),
            mle: MleConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 2 {
            return Err(Error::Config(format!("n_init must be at least 2, got {}", self.n_init)));
        }
        if self.n_init > self.fe_max {
            return Err(Error::BudgetExhaustedAtInit {
                n_init: self.n_init,
                fe_max: self.fe_max,
            });
        }
        if self.batch_q == 0 {
            return Err(Error::Config("batch_q must be at least 1".into()));
        }
        if self.backend == Backend::ConsEgo && self.batch_q != 1 {
            return Err(Error::Config("cons-ego proposes one point per iteration; set batch_q = 1".into()));
        }
        if self.inner_pop < 4 {
            return Err(Error::Config("inner_pop must be at least 4".into()));
        }
        if self.weights_h == 0 {
            return Err(Error::Config("weights_h must be at least 1".into()));
        }
        Ok(())
    }

    fn de(&self) -> DeConfig {
        DeConfig {
            pop: self.inner_pop,
            gens: self.inner_gens,
            ..DeConfig::default()
        }
    }
}

/// Anything that yields a predictive Gaussian at a decision vector.
pub trait Predictor: Sync {
    /// Posterior mean and variance.
    fn predict(&self, x: &[f64]) -> (f64, f64);
}

impl Predictor for GpState {
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        GpState::predict(self, x)
    }
}

/// One output channel's surrogate in either mode.
#[derive(Debug, Clone)]
pub enum ChannelModel {
    Experience(Surrogate),
    Baseline { base: BaseKernelParams, state: GpState },
}

impl Predictor for ChannelModel {
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        match self {
            ChannelModel::Experience(s) => s.state.as_ref().expect("surrogates are fitted before use").predict(x),
            ChannelModel::Baseline { state, .. } => state.predict(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// 0 for the initial design.
    pub iteration: usize,
    pub x: Vec<f64>,
    /// Objectives followed by constraints.
    pub outputs: Vec<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub iteration: usize,
    pub channel: usize,
    pub record: UpdateRecord,
}

/// Everything evaluated during a run, one dataset per output channel.
#[derive(Debug, Clone)]
pub struct Archive {
    pub channels: Vec<Dataset>,
    pub n_objectives: usize,
    pub fe: usize,
    pub history: Vec<HistoryEntry>,
    pub updates: Vec<UpdateEvent>,
    /// Set when a surrogate failure cut the run short.
    pub aborted: Option<String>,
}

impl Archive {
    fn new(spec: &TaskSpec) -> Self {
        Archive {
            channels: (0..spec.n_outputs()).map(|_| Dataset::empty(spec.bounds.clone())).collect(),
            n_objectives: spec.m,
            fe: 0,
            history: Vec::new(),
            updates: Vec::new(),
            aborted: None,
        }
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.channels[0].xs
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.channels[0].bounds
    }

    pub fn objectives(&self) -> Vec<Vec<f64>> {
        self.history.iter().map(|h| h.outputs[..self.n_objectives].to_vec()).collect()
    }

    pub fn feasible_count(&self) -> usize {
        self.history.iter().filter(|h| h.feasible).count()
    }

    /// Feasible points among the evaluations proposed after the initial design.
    pub fn feasible_found(&self) -> usize {
        self.history.iter().filter(|h| h.feasible && h.iteration > 0).count()
    }

    /// Lowest first objective over feasible entries.
    pub fn best_feasible(&self) -> Option<f64> {
        self.history
            .iter()
            .filter(|h| h.feasible)
            .map(|h| h.outputs[0])
            .min_by(f64::total_cmp)
    }

    fn record(&mut self, iteration: usize, x: Vec<f64>, outputs: Vec<f64>, feasible: bool) -> Result<()> {
        for (c, v) in self.channels.iter_mut().zip(&outputs) {
            c.push(x.clone(), *v)?;
        }
        self.fe += 1;
        self.history.push(HistoryEntry {
            iteration,
            x,
            outputs,
            feasible,
        });
        Ok(())
    }

    /// Writes the evaluation log: `iter,fe,x0..,f0..,[c0..],feasible`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d = self.bounds().len();
        let n_cons = self.channels.len() - self.n_objectives;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["iter".to_string(), "fe".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.extend((0..self.n_objectives).map(|i| format!("f{i}")));
        header.extend((0..n_cons).map(|i| format!("c{i}")));
        header.push("feasible".into());
        w.write_record(&header)?;
        for (k, h) in self.history.iter().enumerate() {
            let mut row = vec![h.iteration.to_string(), (k + 1).to_string()];
            row.extend(h.x.iter().map(|v| format!("{v:.16e}")));
            row.extend(h.outputs.iter().map(|v| format!("{v:.16e}")));
            row.push(u8::from(h.feasible).to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Reproducibility record written next to the evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: OptimizerConfig,
    pub task: TaskSpec,
    pub seed: u64,
    pub fe: usize,
    pub aborted: Option<String>,
}

impl RunManifest {
    pub fn new(cfg: &OptimizerConfig, task: &TaskSpec, archive: &Archive) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            task: task.clone(),
            seed: cfg.seed,
            fe: archive.fe,
            aborted: archive.aborted.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// The initial design of a run. It depends only on `(seed, n_init)` so that
/// every mode sharing a repetition seed and design size sees the same points.
pub fn initial_design(seed: u64, n_init: usize, bounds: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngStream::new(seed, INIT_STREAM ^ ((n_init as u64) << 32));
    lhs_sample(n_init, bounds, &mut rng)
}

/// Runs the optimization loop until the evaluation budget is spent.
///
/// Surrogate failures do not raise: the archive collected so far is returned
/// with [`Archive::aborted`] set.
pub fn run_framework(target: &TaskSpec, experiences: Option<&[ExperienceParams]>, cfg: &OptimizerConfig) -> Result<Archive> {
    cfg.validate()?;
    match (cfg.mode, experiences) {
        (Mode::ExperienceBased, None) => {
            return Err(Error::Config("experience-based mode needs experiences".into()));
        }
        (Mode::BaselineGp, Some(_)) => {
            return Err(Error::Config("baseline mode takes no experiences".into()));
        }
        (_, Some(e)) if e.len() != target.n_outputs() => {
            return Err(Error::Config(format!(
                "{} experience stores for {} output channels",
                e.len(),
                target.n_outputs()
            )));
        }
        (_, Some(e)) if e.iter().any(|x| x.dim() != target.d) => {
            return Err(Error::Config(format!("experience dimension differs from d = {}", target.d)));
        }
        _ => {}
    }
    if cfg.backend == Backend::MoeadEgo && target.m < 2 {
        return Err(Error::Config("moead-ego needs at least two objectives".into()));
    }

    let mut archive = Archive::new(target);
    for x in initial_design(cfg.seed, cfg.n_init, &target.bounds)? {
        let e = target.evaluate(&x, None)?;
        let feasible = e.feasible();
        archive.record(0, x, e.channels(), feasible)?;
    }
    if archive.fe >= cfg.fe_max {
        return Ok(archive);
    }

    let mut models = match build_models(&archive, experiences, cfg) {
        Ok(m) => m,
        Err(e) => {
            archive.aborted = Some(e.to_string());
            return Ok(archive);
        }
    };
    let mut weights = simplex_lattice_weights(target.m.max(2), cfg.weights_h);
    RngStream::new(cfg.seed, WEIGHT_STREAM).shuffle(&mut weights);
    let mut cursor = 0usize;
    let proposer = RngStream::new(cfg.seed, PROPOSE_STREAM);
    let de = cfg.de();

    let mut iteration = 0;
    while archive.fe < cfg.fe_max {
        iteration += 1;
        let q = cfg.batch_q.min(cfg.fe_max - archive.fe);
        let mut rng = proposer.substream(PROPOSE_STREAM + iteration as u64);
        let preds: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();
        let proposals = match cfg.backend {
            Backend::MoeadEgo => {
                let p = moead_ego_propose(&preds[..target.m], &archive, &weights, cursor, q, &de, &mut rng);
                cursor += q;
                p
            }
            Backend::ConsEgo => vec![cons_ego_propose(preds[0], &preds[1..], &archive, &de, &mut rng)],
        };
        for x in proposals {
            let e = target.evaluate(&x, None)?;
            let feasible = e.feasible();
            archive.record(iteration, x, e.channels(), feasible)?;
        }
        if archive.fe >= cfg.fe_max {
            break;
        }
        match update_models(&models, &archive, cfg) {
            Ok(next) => {
                let mut fresh = Vec::with_capacity(next.len());
                for (channel, (model, record)) in next.into_iter().enumerate() {
                    if let Some(record) = record {
                        archive.updates.push(UpdateEvent {
                            iteration,
                            channel,
                            record,
                        });
                    }
                    fresh.push(model);
                }
                models = fresh;
            }
            Err(e) => {
                archive.aborted = Some(e.to_string());
                return Ok(archive);
            }
        }
    }
    Ok(archive)
}

fn build_models(archive: &Archive, experiences: Option<&[ExperienceParams]>, cfg: &OptimizerConfig) -> Result<Vec<ChannelModel>> {
    archive
        .channels
        .par_iter()
        .enumerate()
        .map(|(c, data)| match experiences {
            Some(exps) => {
                let s = Surrogate::new(exps[c].clone(), cfg.adapt.clone()).adapt(data)?;
                Ok(ChannelModel::Experience(s))
            }
            None => {
                let (base, state) = fit_mle_gp(data, &cfg.mle, None)?;
                Ok(ChannelModel::Baseline { base, state })
            }
        })
        .collect()
}

type Updated = (ChannelModel, Option<UpdateRecord>);

fn update_models(models: &[ChannelModel], archive: &Archive, cfg: &OptimizerConfig) -> Result<Vec<Updated>> {
    models
        .par_iter()
        .zip(archive.channels.par_iter())
        .map(|(model, data)| match model {
            ChannelModel::Experience(s) if data.len() >= 3 => {
                let (next, record) = s.update(data)?;
                Ok((ChannelModel::Experience(next), Some(record)))
            }
            ChannelModel::Experience(s) => Ok((ChannelModel::Experience(s.refit(data)?), None)),
            ChannelModel::Baseline { base, .. } => {
                let (base, state) = fit_mle_gp(data, &cfg.mle, Some(base))?;
                Ok((ChannelModel::Baseline { base, state }, None))
            }
        })
        .collect()
}

/// `(f_min - μ)Φ(u) + sφ(u)` with `u = (f_min - μ)/s`; zero when `s = 0`.
pub fn expected_improvement(mean: f64, sd: f64, f_min: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    let diff = f_min - mean;
    let u = diff / sd;
    (diff * normal_cdf(u) + sd * normal_pdf(u)).max(0.0)
}

/// `Φ(-μ/s)`; a step function of the sign of `μ` when `s = 0`.
pub fn probability_of_feasibility(mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return if mean <= 0.0 { 1.0 } else { 0.0 };
    }
    normal_cdf(-mean / sd)
}

/// `ln φ(u)`.
fn log_pdf(u: f64) -> f64 {
    -0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `ln Φ(u)`, accurate deep in the lower tail.
fn log_cdf(u: f64) -> f64 {
    if u > -30.0 {
        normal_cdf(u).ln()
    } else {
        // Mills ratio: Φ(u) ≈ φ(u)/|u| · (1 - 1/u²)
        log_pdf(u) - (-u).ln() + (1.0 - 1.0 / (u * u)).ln()
    }
}

/// Logarithm of the expected improvement. Stays finite where the plain
/// value underflows, which keeps the inner search informative far from
/// the incumbent. Same maximizer as [`expected_improvement`].
pub fn log_expected_improvement(mean: f64, sd: f64, f_min: f64) -> f64 {
    if sd <= 0.0 {
        return if mean < f_min { (f_min - mean).ln() } else { f64::NEG_INFINITY };
    }
    let u = (f_min - mean) / sd;
    if u > -10.0 {
        let ei = expected_improvement(mean, sd, f_min);
        if ei > 0.0 {
            return ei.ln();
        }
    }
    // φ(u) + uΦ(u) = φ(u)·(1/u² - 3/u⁴ + 15/u⁶ - …) for u → -∞
    let w = 1.0 / (u * u);
    sd.ln() + log_pdf(u) + (w * (1.0 - 3.0 * w + 15.0 * w * w)).ln()
}

fn log_pof(mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return if mean <= 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    log_cdf(-mean / sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub pop: usize,
    pub gens: usize,
    pub f: f64,
    pub cr: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            pop: 40,
            gens: 60,
            f: 0.5,
            cr: 0.9,
        }
    }
}

/// Differential evolution (rand/1/bin) maximizing `score` over the box.
/// Mutants leaving the box are pulled halfway back towards their parent.
/// Population scores are evaluated in parallel and reduced in order.
pub fn de_maximize<F>(score: F, bounds: &[(f64, f64)], cfg: &DeConfig, rng: &mut RngStream) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    de_maximize_seeded(score, bounds, cfg, &[], rng)
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// As [`de_maximize`], with some initial members supplied by the caller.
pub fn de_maximize_seeded<F>(score: F, bounds: &[(f64, f64)], cfg: &DeConfig, seeds: &[Vec<f64>], rng: &mut RngStream) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let np = cfg.pop.max(4);
    let d = bounds.len();
    let mut pop = uniform_sample(np, bounds, rng).expect("caller validated bounds");
    for (slot, s) in pop.iter_mut().zip(seeds) {
        *slot = s.clone();
    }
    let mut fit: Vec<f64> = pop.par_iter().map(|x| sanitize(score(x))).collect();
    for _ in 0..cfg.gens {
        let mut trials = Vec::with_capacity(np);
        for i in 0..np {
            let mut pick = |avoid: &[usize]| loop {
                let r = rng.below(np);
                if !avoid.contains(&r) {
                    break r;
                }
            };
            let r1 = pick(&[i]);
            let r2 = pick(&[i, r1]);
            let r3 = pick(&[i, r1, r2]);
            let jrand = rng.below(d);
            let mut t = pop[i].clone();
            for j in 0..d {
                if j == jrand || rng.uniform() < cfg.cr {
                    let (lo, hi) = bounds[j];
                    let v = pop[r1][j] + cfg.f * (pop[r2][j] - pop[r3][j]);
                    t[j] = if v < lo {
                        0.5 * (pop[i][j] + lo)
                    } else if v > hi {
                        0.5 * (pop[i][j] + hi)
                    } else {
                        v
                    };
                }
            }
            trials.push(t);
        }
        let tfit: Vec<f64> = trials.par_iter().map(|x| sanitize(score(x))).collect();
        for (i, (t, f)) in trials.into_iter().zip(tfit).enumerate() {
            if f >= fit[i] {
                pop[i] = t;
                fit[i] = f;
            }
        }
    }
    let best = (0..np).fold(0, |b, i| if fit[i] > fit[b] { i } else { b });
    pop.swap_remove(best)
}

fn scaled_distance(a: &[f64], b: &[f64], bounds: &[(f64, f64)]) -> f64 {
    a.iter()
        .zip(b)
        .zip(bounds)
        .map(|((x, y), (lo, hi))| ((x - y) / (hi - lo)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn too_close(x: &[f64], others: &[Vec<f64>], radius: f64, bounds: &[(f64, f64)]) -> bool {
    others.iter().any(|o| scaled_distance(x, o, bounds) < radius)
}

/// Maximizes `score`, re-optimizing away from `taken` on a collision and
/// falling back to a random free point if that keeps failing.
fn propose_unique<F>(score: F, taken: &[Vec<f64>], bounds: &[(f64, f64)], de: &DeConfig, rng: &mut RngStream) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let x = de_maximize(&score, bounds, de, rng);
    if !too_close(&x, taken, MIN_DISTANCE, bounds) {
        return x;
    }
    for _ in 0..RETRIES {
        let mut start = x.clone();
        for (v, (lo, hi)) in start.iter_mut().zip(bounds) {
            *v = (*v + RETRY_RADIUS * (hi - lo) * rng.standard_normal()).clamp(*lo, *hi);
        }
        let masked = |y: &[f64]| {
            if too_close(y, taken, RETRY_RADIUS, bounds) {
                f64::NEG_INFINITY
            } else {
                score(y)
            }
        };
        let y = de_maximize_seeded(masked, bounds, de, &[start], rng);
        if !too_close(&y, taken, MIN_DISTANCE, bounds) {
            return y;
        }
    }
    loop {
        let y = uniform_sample(1, bounds, rng).expect("valid bounds").remove(0);
        if !too_close(&y, taken, MIN_DISTANCE, bounds) {
            return y;
        }
    }
}

/// Tchebycheff value `max_i λ_i |f_i - z_i|`.
pub fn tchebycheff(f: &[f64], lambda: &[f64], ideal: &[f64]) -> f64 {
    f.iter()
        .zip(lambda)
        .zip(ideal)
        .map(|((fi, l), z)| l * (fi - z).abs())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Componentwise minimum of the archive objectives.
pub fn ideal_point(objectives: &[Vec<f64>]) -> Vec<f64> {
    let m = objectives[0].len();
    (0..m)
        .map(|i| objectives.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Proposes `q` points, one per weight vector taken round-robin from
/// `weights` starting at `cursor`. Each maximizes the expected improvement
/// of the Tchebycheff aggregation of the objective surrogates over the best
/// aggregated archive value for that weight.
pub fn moead_ego_propose(
    surrogates: &[&dyn Predictor],
    archive: &Archive,
    weights: &[Vec<f64>],
    cursor: usize,
    q: usize,
    de: &DeConfig,
    rng: &mut RngStream,
) -> Vec<Vec<f64>> {
    let objs = archive.objectives();
    let ideal = ideal_point(&objs);
    let bounds = archive.bounds().to_vec();
    let mut taken: Vec<Vec<f64>> = archive.xs().to_vec();
    let mut out = Vec::with_capacity(q);
    for k in 0..q {
        let lambda = &weights[(cursor + k) % weights.len()];
        let f_min = objs
            .iter()
            .map(|f| tchebycheff(f, lambda, &ideal))
            .fold(f64::INFINITY, f64::min);
        let score = |x: &[f64]| {
            let mut mean = f64::NEG_INFINITY;
            let mut var = 0.0;
            for ((s, l), z) in surrogates.iter().zip(lambda).zip(&ideal) {
                let (mu, v) = s.predict(x);
                mean = mean.max(l * (mu - z).abs());
                var += l * l * v;
            }
            log_expected_improvement(mean, var.max(0.0).sqrt(), f_min)
        };
        let x = propose_unique(score, &taken, &bounds, de, rng);
        taken.push(x.clone());
        out.push(x);
    }
    out
}

/// Incumbent for the constrained backend: best feasible objective, or the
/// best objective overall while nothing feasible is known.
pub fn constrained_incumbent(archive: &Archive) -> f64 {
    archive.best_feasible().unwrap_or_else(|| {
        archive
            .history
            .iter()
            .map(|h| h.outputs[0])
            .fold(f64::INFINITY, f64::min)
    })
}

/// Maximizes `EI × Π_j PoF_j` (in log space).
pub fn cons_ego_propose(
    objective: &dyn Predictor,
    constraints: &[&dyn Predictor],
    archive: &Archive,
    de: &DeConfig,
    rng: &mut RngStream,
) -> Vec<f64> {
    let f_min = constrained_incumbent(archive);
    let bounds = archive.bounds().to_vec();
    let score = |x: &[f64]| {
        let (mu, v) = objective.predict(x);
        let mut s = log_expected_improvement(mu, v.max(0.0).sqrt(), f_min);
        for c in constraints {
            let (cm, cv) = c.predict(x);
            s += log_pof(cm, cv.max(0.0).sqrt());
        }
        s
    };
    propose_unique(score, archive.xs(), &bounds, de, rng)
}

//! Meta-learning of task-independent deep-kernel parameters ("experiences")
//! across small datasets drawn from related tasks, and the JSON store that
//! carries them from the offline phase into optimization.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::deepkernel::{BaseKernelParams, DeepKernelParams, Layer, MlpParams, TaskIncrements, HIDDEN_LAYERS, HIDDEN_UNITS, P_MAX};
use crate::error::{Error, Result};
use crate::gp::{nll_eval, Dataset, GradientScope, DEFAULT_NUGGET};
use crate::numkit::RngStream;
use crate::optim::{Adam, StepRule, Stepper};

/// Random stream id reserved for meta-training.
const META_STREAM: u64 = 0x6d65_7461;

pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Number of datasets consumed in total (`N_m`).
    pub n_meta: usize,
    /// Points subsampled from each dataset (`|D_m|`).
    pub dm_size: usize,
    /// Datasets per update (`B`).
    pub batch: usize,
    pub lr_alpha: f64,
    pub seed: u64,
    pub step_rule: StepRule,
    /// Adam steps on the per-dataset increments before the loss is taken.
    /// Zero reproduces the plain procedure.
    pub inner_steps: usize,
    pub hidden: Vec<usize>,
    pub nugget: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            n_meta: 2000,
            dm_size: 10,
            batch: 10,
            lr_alpha: 0.001,
            seed: 0,
            step_rule: StepRule::Adam,
            inner_steps: 0,
            hidden: vec![HIDDEN_UNITS; HIDDEN_LAYERS],
            nugget: DEFAULT_NUGGET,
        }
    }
}

impl MetaConfig {
    /// Number of parameter updates, `floor(N_m / B)`.
    pub fn iterations(&self) -> usize {
        if self.batch == 0 {
            0
        } else {
            self.n_meta / self.batch
        }
    }
}

/// Task-independent deep-kernel parameters learned across related tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceParams {
    pub params: DeepKernelParams,
}

impl ExperienceParams {
    pub fn new(params: DeepKernelParams) -> Self {
        ExperienceParams { params }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean loss over the batch, one entry per iteration.
    pub losses: Vec<f64>,
    /// Datasets whose loss could not be evaluated.
    pub skipped: usize,
    pub updates: usize,
}

/// Learns experiences from `sources`; see [`MetaConfig`] for the knobs.
///
/// Each iteration draws `B` datasets (a fresh permutation when there are at
/// least `N_m` of them, uniformly with replacement otherwise), subsamples
/// `|D_m|` points from each without replacement, and sums the likelihood
/// gradients of the batch into one update of `{w, b, log θ, p}`. Per-dataset
/// increments start at zero and never outlive their dataset.
pub fn meta_train(sources: &[Dataset], cfg: &MetaConfig) -> Result<(ExperienceParams, TrainingTrace)> {
    let first = sources.first().ok_or(Error::EmptySet("meta-training sources"))?;
    let d = first.dim();
    if cfg.batch == 0 || cfg.iterations() == 0 {
        return Err(Error::Config(format!(
            "n_meta = {} and batch = {} give no update iterations",
            cfg.n_meta, cfg.batch
        )));
    }
    if cfg.dm_size < 2 {
        return Err(Error::Config("dm_size must be at least 2".into()));
    }
    for (i, s) in sources.iter().enumerate() {
        if s.dim() != d {
            return Err(Error::Config(format!("source {i} has dimension {}, expected {d}", s.dim())));
        }
        if s.len() < cfg.dm_size {
            return Err(Error::Config(format!(
                "source {i} has {} points, fewer than dm_size = {}",
                s.len(),
                cfg.dm_size
            )));
        }
    }

    let mut rng = RngStream::new(cfg.seed, META_STREAM);
    let mut params = DeepKernelParams {
        mlp: MlpParams::glorot(d, &cfg.hidden, &mut rng),
        base: BaseKernelParams::uniform(d, 1.0, P_MAX),
    };
    let mut flat = params.to_flat();
    let mut stepper = Stepper::new(cfg.step_rule, flat.len(), cfg.lr_alpha);
    let mut trace = TrainingTrace::default();

    let n = sources.len();
    let mut order: Vec<usize> = (0..n).collect();
    let without_replacement = n >= cfg.n_meta;
    if without_replacement {
        rng.shuffle(&mut order);
    }
    let mut cursor = 0;

    for _ in 0..cfg.iterations() {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let src = if without_replacement {
                cursor += 1;
                &sources[order[cursor - 1]]
            } else {
                &sources[rng.below(n)]
            };
            batch.push(subsample(src, cfg.dm_size, &mut rng));
        }
        let results: Vec<Option<(f64, Vec<f64>)>> = batch
            .par_iter()
            .map(|data| dataset_loss(&params, data, cfg))
            .collect();

        let mut grad = vec![0.0; flat.len()];
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for r in results {
            match r {
                Some((loss, g)) => {
                    loss_sum += loss;
                    used += 1;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => trace.skipped += 1,
            }
        }
        if used == 0 {
            trace.losses.push(f64::NAN);
            continue;
        }
        stepper.step(&mut flat, &grad);
        params.set_flat(&flat);
        params.base.clamp();
        flat = params.to_flat();
        trace.updates += 1;
        trace.losses.push(loss_sum / used as f64);
    }
    Ok((ExperienceParams::new(params), trace))
}

fn subsample(src: &Dataset, k: usize, rng: &mut RngStream) -> Dataset {
    let mut idx: Vec<usize> = (0..src.len()).collect();
    // partial Fisher-Yates
    for i in 0..k {
        let j = i + rng.below(src.len() - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    src.subset(&idx)
}

/// Loss and flat gradient on one dataset; `None` if it cannot be evaluated.
fn dataset_loss(params: &DeepKernelParams, data: &Dataset, cfg: &MetaConfig) -> Option<(f64, Vec<f64>)> {
    let d = params.dim();
    let mut inc = TaskIncrements::zeros(d);
    if cfg.inner_steps > 0 {
        let mut adam = Adam::new(2 * d, cfg.lr_alpha);
        let mut v = inc.to_flat();
        for _ in 0..cfg.inner_steps {
            let (_, g) = nll_eval(params, &inc, data, cfg.nugget, GradientScope::Kernel).ok()?;
            adam.step(&mut v, &g?.increments.to_flat());
            inc = TaskIncrements::from_flat(&v);
        }
    }
    let (loss, g) = nll_eval(params, &inc, data, cfg.nugget, GradientScope::Full).ok()?;
    let g = g?.params.to_flat();
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((loss, g))
}

fn fmt_real(out: &mut String, v: f64) {
    // 17 significant digits round-trip every finite double
    write!(out, "{v:.16e}").expect("writing to a String");
}

fn fmt_array(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, v) in vs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        fmt_real(out, *v);
    }
    out.push(']');
}

fn store_json(p: &ExperienceParams, indent: &str) -> String {
    let params = &p.params;
    let mut s = String::new();
    let _ = writeln!(s, "{{");
    let _ = writeln!(s, "{indent}  \"version\": {STORE_VERSION},");
    let _ = writeln!(s, "{indent}  \"d\": {},", params.dim());
    let sizes: Vec<String> = params.mlp.layer_sizes().iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "{indent}  \"layer_sizes\": [{}],", sizes.join(", "));
    for (name, pick) in [("weights", true), ("biases", false)] {
        let _ = write!(s, "{indent}  \"{name}\": [");
        for (i, l) in params.mlp.layers.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            fmt_array(&mut s, if pick { &l.weights } else { &l.biases });
        }
        let _ = writeln!(s, "],");
    }
    let _ = write!(s, "{indent}  \"log_theta\": ");
    fmt_array(&mut s, &params.base.log_theta);
    let _ = write!(s, ",\n{indent}  \"p\": ");
    fmt_array(&mut s, &params.base.p);
    let _ = write!(s, "\n{indent}}}");
    s
}

pub fn save_experiences(params: &ExperienceParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = store_json(params, "");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one store per output channel as a JSON array.
pub fn save_experience_set(set: &[ExperienceParams], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("[\n");
    for (i, p) in set.iter().enumerate() {
        if i > 0 {
            text.push_str(",\n");
        }
        text.push_str("  ");
        text.push_str(&store_json(p, "  "));
    }
    text.push_str("\n]\n");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn schema(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::SchemaError {
        field: field.into(),
        reason: reason.into(),
    }
}

fn real_array(v: &Value, field: &str, len: usize) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| schema(field, "expected an array"))?;
    if arr.len() != len {
        return Err(schema(field, format!("expected {len} entries, found {}", arr.len())));
    }
    arr.iter()
        .map(|x| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| schema(field, "expected finite numbers"))
        })
        .collect()
}

fn parse_store(v: &Value) -> Result<ExperienceParams> {
    let version = v
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| schema("version", "missing or not an integer"))?;
    if version != STORE_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: STORE_VERSION,
        });
    }
    let d = v
        .get("d")
        .and_then(Value::as_u64)
        .ok_or_else(|| schema("d", "missing or not an integer"))? as usize;
    let sizes: Vec<usize> = v
        .get("layer_sizes")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("layer_sizes", "missing or not an array"))?
        .iter()
        .map(|x| x.as_u64().map(|u| u as usize).ok_or_else(|| schema("layer_sizes", "expected integers")))
        .collect::<Result<_>>()?;
    if !sizes.is_empty() && (sizes.len() < 2 || sizes[0] != d || sizes[sizes.len() - 1] != d) {
        return Err(schema("layer_sizes", format!("must start and end with d = {d}")));
    }
    let n_layers = sizes.len().saturating_sub(1);
    let weights = v.get("weights").and_then(Value::as_array).ok_or_else(|| schema("weights", "missing"))?;
    let biases = v.get("biases").and_then(Value::as_array).ok_or_else(|| schema("biases", "missing"))?;
    if weights.len() != n_layers {
        return Err(schema("weights", format!("expected {n_layers} layers, found {}", weights.len())));
    }
    if biases.len() != n_layers {
        return Err(schema("biases", format!("expected {n_layers} layers, found {}", biases.len())));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let (inputs, outputs) = (sizes[i], sizes[i + 1]);
        layers.push(Layer {
            inputs,
            outputs,
            weights: real_array(&weights[i], &format!("weights[{i}]"), inputs * outputs)?,
            biases: real_array(&biases[i], &format!("biases[{i}]"), outputs)?,
        });
    }
    let log_theta = real_array(v.get("log_theta").unwrap_or(&Value::Null), "log_theta", d)?;
    let p = real_array(v.get("p").unwrap_or(&Value::Null), "p", d)?;
    Ok(ExperienceParams::new(DeepKernelParams {
        mlp: MlpParams { layers },
        base: BaseKernelParams { log_theta, p },
    }))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_experiences(path: impl AsRef<Path>) -> Result<ExperienceParams> {
    parse_store(&read_json(path.as_ref())?)
}

/// Reads either a single store or an array of per-channel stores.
pub fn load_experience_set(path: impl AsRef<Path>) -> Result<Vec<ExperienceParams>> {
    match read_json(path.as_ref())? {
        Value::Array(items) => items.iter().map(parse_store).collect(),
        single => Ok(vec![parse_store(&single)?]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sources(n: usize, rng: &mut RngStream) -> Vec<Dataset> {
        (0..n)
            .map(|_| {
                let a = rng.uniform_in(0.5, 2.0);
                let xs: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
                let ys = xs.iter().map(|x| a * (4.0 * x[0]).sin() + x[1]).collect();
                Dataset::new(xs, ys, vec![(0.0, 1.0); 2]).unwrap()
            })
            .collect()
    }

    fn small_cfg() -> MetaConfig {
        MetaConfig {
            n_meta: 20,
            dm_size: 6,
            batch: 5,
            hidden: vec![8, 8],
            ..MetaConfig::default()
        }
    }

    #[test]
    fn single_update() {
        let sources = toy_sources(3, &mut RngStream::new(1, 0));
        let cfg = MetaConfig {
            n_meta: 1,
            batch: 1,
            ..small_cfg()
        };
        let (_, trace) = meta_train(&sources, &cfg).unwrap();
        assert_eq!(trace.updates, 1);
        assert_eq!(trace.losses.len(), 1);
    }

    #[test]
    fn zero_rate_keeps_initialization() {
        let sources = toy_sources(4, &mut RngStream::new(2, 0));
        let cfg = MetaConfig {
            lr_alpha: 0.0,
            ..small_cfg()
        };
        let (p, trace) = meta_train(&sources, &cfg).unwrap();
        assert_eq!(trace.updates, 4);
        let mut rng = RngStream::new(cfg.seed, META_STREAM);
        let init = DeepKernelParams {
            mlp: MlpParams::glorot(2, &cfg.hidden, &mut rng),
            base: BaseKernelParams::uniform(2, 1.0, P_MAX),
        };
        assert_eq!(p.params, init);
    }

    #[test]
    fn deterministic_and_clamped() {
        let sources = toy_sources(6, &mut RngStream::new(3, 0));
        let cfg = MetaConfig {
            lr_alpha: 0.05,
            ..small_cfg()
        };
        let (a, ta) = meta_train(&sources, &cfg).unwrap();
        let (b, tb) = meta_train(&sources, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for (lt, p) in a.params.base.log_theta.iter().zip(&a.params.base.p) {
            assert!(lt.exp() >= 1e-5 * (1.0 - 1e-12) && lt.exp() <= 100.0 * (1.0 + 1e-12));
            assert!((1.0..=2.0).contains(p));
        }
    }

    #[test]
    fn rejects_oversized_subsample() {
        let sources = toy_sources(2, &mut RngStream::new(4, 0));
        let cfg = MetaConfig {
            dm_size: 9,
            ..small_cfg()
        };
        assert!(matches!(meta_train(&sources, &cfg), Err(Error::Config(_))));
        assert!(matches!(meta_train(&[], &cfg), Err(Error::EmptySet(_))));
    }

    #[test]
    fn store_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(5, 0);
        let mut params = DeepKernelParams::init(3, &mut rng);
        params.base.log_theta = vec![0.1 / 3.0, -2.0f64.sqrt(), std::f64::consts::PI];
        params.base.p = vec![1.0 + 1e-16 * 3.0, 1.5, 1.999_999_999_999_9];
        let exp = ExperienceParams::new(params);
        let path = dir.path().join("e.json");
        save_experiences(&exp, &path).unwrap();
        assert_eq!(load_experiences(&path).unwrap(), exp);

        let set_path = dir.path().join("set.json");
        save_experience_set(&[exp.clone(), exp.clone()], &set_path).unwrap();
        assert_eq!(load_experience_set(&set_path).unwrap(), vec![exp.clone(), exp.clone()]);
        assert_eq!(load_experience_set(&path).unwrap(), vec![exp]);
    }

    #[test]
    fn store_errors() {
        let dir = tempfile::tempdir().unwrap();
        let exp = ExperienceParams::new(DeepKernelParams::init(2, &mut RngStream::new(6, 0)));
        let path = dir.path().join("e.json");
        save_experiences(&exp, &path).unwrap();
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();

        let mut wrong = v.clone();
        wrong["version"] = Value::from(7);
        std::fs::write(&path, wrong.to_string()).unwrap();
        assert!(matches!(
            load_experiences(&path),
            Err(Error::VersionMismatch { found: 7, .. })
        ));

        v["log_theta"].as_array_mut().unwrap().pop();
        std::fs::write(&path, v.to_string()).unwrap();
        match load_experiences(&path) {
            Err(Error::SchemaError { field, .. }) => assert_eq!(field, "log_theta"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_experiences(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }
}

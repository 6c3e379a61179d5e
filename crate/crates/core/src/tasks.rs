//! Task families: noisy sinusoids, parameterized DTLZ1-7 variants and a
//! synthetic constrained single-objective family.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Dataset;
use crate::numkit::{lhs_sample, uniform_sample, RngStream};

pub const SINUSOID_NOISE_STD: f64 = 0.1;
pub const SINUSOID_BOUNDS: (f64, f64) = (-5.0, 5.0);
pub const CONSTRAINED_DIM: usize = 6;
pub const CONSTRAINED_COUNT: usize = 4;
/// Admissible Monte-Carlo feasible fraction of a constrained task.
pub const FEASIBLE_FRACTION: (f64, f64) = (0.05, 0.5);
const CALIBRATION_POINTS: usize = 10_000;
const CALIBRATION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sinusoid,
    Dtlz1,
    Dtlz2,
    Dtlz3,
    Dtlz4,
    Dtlz5,
    Dtlz6,
    Dtlz7,
    ConstrainedSynthetic,
}

impl Family {
    pub const DTLZ: [Family; 7] = [
        Family::Dtlz1,
        Family::Dtlz2,
        Family::Dtlz3,
        Family::Dtlz4,
        Family::Dtlz5,
        Family::Dtlz6,
        Family::Dtlz7,
    ];

    pub fn is_dtlz(self) -> bool {
        Family::DTLZ.contains(&self)
    }

    /// Whether the variant carries the angular scale vector `b`.
    fn has_b(self) -> bool {
        matches!(
            self,
            Family::Dtlz2 | Family::Dtlz3 | Family::Dtlz4 | Family::Dtlz5 | Family::Dtlz6
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Sinusoid => "sinusoid",
            Family::Dtlz1 => "dtlz1",
            Family::Dtlz2 => "dtlz2",
            Family::Dtlz3 => "dtlz3",
            Family::Dtlz4 => "dtlz4",
            Family::Dtlz5 => "dtlz5",
            Family::Dtlz6 => "dtlz6",
            Family::Dtlz7 => "dtlz7",
            Family::ConstrainedSynthetic => "constrained-synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        let all = [Family::Sinusoid, Family::ConstrainedSynthetic];
        all.iter()
            .chain(Family::DTLZ.iter())
            .copied()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnsupportedFamily(s.to_string()))
    }
}

/// How related tasks relate to the canonical target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    InRange,
    OutOfRange,
}

impl Regime {
    fn a_range(self) -> (f64, f64) {
        match self {
            Regime::InRange => (0.1, 5.0),
            Regime::OutOfRange => (1.5, 5.0),
        }
    }

    fn b_range(self) -> (f64, f64) {
        match self {
            Regime::InRange => (0.5, 2.0),
            Regime::OutOfRange => (0.5, 1.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Lhs,
    Uniform,
}

/// One member of a task family.
///
/// `params` layout by family:
/// * sinusoid: `[A, w, b]`
/// * DTLZ: `a` (length `m`), followed by `b` (length `m`) for DTLZ2-6
/// * constrained: `c` (6), `o` (6), four unit directions (4×6), thresholds (4)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub d: usize,
    pub m: usize,
    pub params: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub n_constraints: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub objectives: Vec<f64>,
    /// Feasible iff every entry is `<= 0`.
    pub constraints: Vec<f64>,
    pub cost: usize,
}

impl Evaluation {
    pub fn feasible(&self) -> bool {
        self.constraints.iter().all(|&c| c <= 0.0)
    }

    /// Objectives followed by constraints.
    pub fn channels(&self) -> Vec<f64> {
        self.objectives.iter().chain(&self.constraints).copied().collect()
    }
}

impl TaskSpec {
    /// Objectives plus constraints.
    pub fn n_outputs(&self) -> usize {
        self.m + self.n_constraints
    }

    pub fn dtlz_a(&self) -> &[f64] {
        &self.params[..self.m]
    }

    pub fn dtlz_b(&self) -> Option<&[f64]> {
        self.family.has_b().then(|| &self.params[self.m..2 * self.m])
    }

    /// Evaluates `x`; only the sinusoid family consumes `noise`.
    pub fn evaluate(&self, x: &[f64], noise: Option<&mut RngStream>) -> Result<Evaluation> {
        if x.len() != self.d {
            return Err(Error::DimensionError {
                expected: self.d,
                got: x.len(),
            });
        }
        let objectives = match self.family {
            Family::Sinusoid => vec![eval_sinusoid(self, x[0], noise)],
            Family::ConstrainedSynthetic => return Ok(eval_constrained(self, x)),
            _ => return eval_dtlz(self, x),
        };
        Ok(Evaluation {
            objectives,
            constraints: Vec::new(),
            cost: 1,
        })
    }
}

fn unit_box(d: usize) -> Vec<(f64, f64)> {
    vec![(0.0, 1.0); d]
}

pub fn sinusoid_spec(amplitude: f64, frequency: f64, phase: f64) -> TaskSpec {
    TaskSpec {
        family: Family::Sinusoid,
        d: 1,
        m: 1,
        params: vec![amplitude, frequency, phase],
        bounds: vec![SINUSOID_BOUNDS],
        n_constraints: 0,
        seed: None,
    }
}

/// `A ∈ [0.1, 5]`, `w ∈ [0.999, 1]`, `b ∈ [0, π]`, all uniform.
pub fn sample_sinusoid(rng: &mut RngStream) -> TaskSpec {
    let a = rng.uniform_in(0.1, 5.0);
    let w = rng.uniform_in(0.999, 1.0);
    let b = rng.uniform_in(0.0, PI);
    sinusoid_spec(a, w, b)
}

/// `A sin(wx + b)` plus N(0, 0.1²) noise when a stream is given.
pub fn eval_sinusoid(spec: &TaskSpec, x: f64, noise: Option<&mut RngStream>) -> f64 {
    let (a, w, b) = (spec.params[0], spec.params[1], spec.params[2]);
    let clean = a * (w * x + b).sin();
    match noise {
        Some(rng) => clean + SINUSOID_NOISE_STD * rng.standard_normal(),
        None => clean,
    }
}

/// The textbook member of a DTLZ family (`a = 1`, `b = 2`; DTLZ7 uses
/// `a = (0, …, 0, 1)`).
pub fn canonical_dtlz(family: Family, d: usize, m: usize) -> Result<TaskSpec> {
    if !family.is_dtlz() {
        return Err(Error::UnsupportedFamily(family.name().into()));
    }
    check_dtlz_shape(d, m)?;
    let mut params = if family == Family::Dtlz7 {
        let mut a = vec![0.0; m];
        a[m - 1] = 1.0;
        a
    } else {
        vec![1.0; m]
    };
    if family.has_b() {
        params.extend(std::iter::repeat_n(2.0, m));
    }
    Ok(TaskSpec {
        family,
        d,
        m,
        params,
        bounds: unit_box(d),
        n_constraints: 0,
        seed: None,
    })
}

fn check_dtlz_shape(d: usize, m: usize) -> Result<()> {
    if m < 2 || d < m {
        return Err(Error::DimensionError { expected: m, got: d });
    }
    Ok(())
}

/// Draws `a` (and `b` where the family has one) uniformly from the regime's box.
pub fn sample_dtlz_variant(family: Family, regime: Regime, d: usize, m: usize, rng: &mut RngStream) -> Result<TaskSpec> {
    let mut spec = canonical_dtlz(family, d, m)?;
    let (alo, ahi) = regime.a_range();
    for a in &mut spec.params[..m] {
        *a = rng.uniform_in(alo, ahi);
    }
    if family.has_b() {
        let (blo, bhi) = regime.b_range();
        for b in &mut spec.params[m..] {
            *b = rng.uniform_in(blo, bhi);
        }
    }
    Ok(spec)
}

fn g_rastrigin(z: &[f64]) -> f64 {
    let k = z.len() as f64;
    100.0 * (k + z.iter().map(|&v| (v - 0.5).powi(2) - (20.0 * PI * (v - 0.5)).cos()).sum::<f64>())
}

fn g_sphere(z: &[f64]) -> f64 {
    z.iter().map(|&v| (v - 0.5).powi(2)).sum()
}

/// Objectives of a DTLZ variant; `y` = first `m-1` coordinates, `z` the rest.
pub fn eval_dtlz(spec: &TaskSpec, x: &[f64]) -> Result<Evaluation> {
    let (d, m) = (spec.d, spec.m);
    check_dtlz_shape(d, m)?;
    if x.len() != d {
        return Err(Error::DimensionError { expected: d, got: x.len() });
    }
    let (y, z) = x.split_at(m - 1);
    let a = spec.dtlz_a();
    let objectives = match spec.family {
        Family::Dtlz1 => {
            let g = g_rastrigin(z);
            (0..m)
                .map(|i| {
                    // f_1 uses every y; f_i drops the tail and multiplies by (1 - y_{m-i})
                    let mut f = (a[i] + g) * 0.5;
                    f *= y[..m - 1 - i].iter().product::<f64>();
                    if i > 0 {
                        f *= 1.0 - y[m - 1 - i];
                    }
                    f
                })
                .collect()
        }
        Family::Dtlz7 => {
            let k = z.len() as f64;
            let g = a[m - 1] + 9.0 * z.iter().sum::<f64>() / k;
            let mut f: Vec<f64> = (0..m - 1).map(|i| y[i] + a[i]).collect();
            let h = m as f64 - f.iter().map(|&fi| fi / (1.0 + g) * (1.0 + (3.0 * PI * fi).sin())).sum::<f64>();
            f.push((1.0 + g) * h);
            f
        }
        fam => {
            let b = spec.dtlz_b().expect("spherical families carry b");
            let g = match fam {
                Family::Dtlz3 => g_rastrigin(z),
                Family::Dtlz6 => z.iter().map(|v| v.powf(0.1)).sum(),
                _ => g_sphere(z),
            };
            let yy: Vec<f64> = match fam {
                Family::Dtlz4 => y.iter().map(|v| v.powi(100)).collect(),
                Family::Dtlz5 | Family::Dtlz6 => y
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if i == 0 { v } else { (1.0 + 2.0 * g * v) / (2.0 * (1.0 + g)) })
                    .collect(),
                _ => y.to_vec(),
            };
            (0..m)
                .map(|i| {
                    let scale = PI / b[i];
                    let mut f = a[i] + g;
                    f *= yy[..m - 1 - i].iter().map(|v| (v * scale).cos()).product::<f64>();
                    if i > 0 {
                        f *= (yy[m - 1 - i] * scale).sin();
                    }
                    f
                })
                .collect()
        }
    };
    Ok(Evaluation {
        objectives,
        constraints: Vec::new(),
        cost: 1,
    })
}

/// Views into the parameter vector of a constrained task.
pub struct ConstrainedParams<'a> {
    pub c: &'a [f64],
    pub o: &'a [f64],
    pub directions: Vec<&'a [f64]>,
    pub thresholds: &'a [f64],
}

pub fn constrained_params(spec: &TaskSpec) -> ConstrainedParams<'_> {
    let d = CONSTRAINED_DIM;
    let p = &spec.params;
    let dirs = &p[2 * d..2 * d + CONSTRAINED_COUNT * d];
    ConstrainedParams {
        c: &p[..d],
        o: &p[d..2 * d],
        directions: dirs.chunks(d).collect(),
        thresholds: &p[2 * d + CONSTRAINED_COUNT * d..],
    }
}

/// `f = Σ c_i (x_i - o_i)²`, `g_j = a_jᵀx - b_j`.
pub fn eval_constrained(spec: &TaskSpec, x: &[f64]) -> Evaluation {
    let cp = constrained_params(spec);
    let f = cp.c.iter().zip(cp.o).zip(x).map(|((c, o), xi)| c * (xi - o).powi(2)).sum();
    let constraints = cp
        .directions
        .iter()
        .zip(cp.thresholds)
        .map(|(a, b)| crate::numkit::dot(a, x) - b)
        .collect();
    Evaluation {
        objectives: vec![f],
        constraints,
        cost: 1,
    }
}

/// Monte-Carlo feasible fraction over uniform points of the unit box.
pub fn feasible_fraction(spec: &TaskSpec, n: usize, rng: &mut RngStream) -> f64 {
    let pts = uniform_sample(n, &spec.bounds, rng).expect("unit box is valid");
    let hits = pts.iter().filter(|x| eval_constrained(spec, x).feasible()).count();
    hits as f64 / n as f64
}

/// Samples a constrained task whose feasible region covers between 5% and
/// 50% of the box. Each attempt draws a target fraction `t ∈ [0.1, 0.4]`
/// and puts every threshold at the `t^{1/4}` quantile of its linear form,
/// then verifies the joint fraction on fresh points.
pub fn sample_constrained(rng: &mut RngStream) -> Result<TaskSpec> {
    let d = CONSTRAINED_DIM;
    let bounds = unit_box(d);
    for _ in 0..CALIBRATION_ATTEMPTS {
        let mut params: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.5, 2.0)).collect();
        params.extend((0..d).map(|_| rng.uniform_in(0.2, 0.8)));
        let mut dirs = Vec::with_capacity(CONSTRAINED_COUNT);
        for _ in 0..CONSTRAINED_COUNT {
            let mut a: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            a.iter_mut().for_each(|v| *v /= norm);
            dirs.push(a);
        }
        let target = rng.uniform_in(0.1, 0.4);
        let q = target.powf(0.25);
        let probe = uniform_sample(CALIBRATION_POINTS, &bounds, rng)?;
        let mut thresholds = Vec::with_capacity(CONSTRAINED_COUNT);
        for a in &dirs {
            let mut proj: Vec<f64> = probe.iter().map(|x| crate::numkit::dot(a, x)).collect();
            proj.sort_by(f64::total_cmp);
            let idx = ((q * CALIBRATION_POINTS as f64) as usize).min(CALIBRATION_POINTS - 1);
            thresholds.push(proj[idx]);
        }
        for a in &dirs {
            params.extend_from_slice(a);
        }
        params.extend(thresholds);
        let spec = TaskSpec {
            family: Family::ConstrainedSynthetic,
            d,
            m: 1,
            params,
            bounds: bounds.clone(),
            n_constraints: CONSTRAINED_COUNT,
            seed: None,
        };
        let frac = feasible_fraction(&spec, CALIBRATION_POINTS, rng);
        if (FEASIBLE_FRACTION.0..=FEASIBLE_FRACTION.1).contains(&frac) {
            return Ok(spec);
        }
    }
    Err(Error::FeasibilityCalibrationFailed(CALIBRATION_ATTEMPTS))
}

/// Related task of `family`; the regime only matters for DTLZ variants.
pub fn sample_task(family: Family, regime: Regime, d: usize, m: usize, rng: &mut RngStream) -> Result<TaskSpec> {
    match family {
        Family::Sinusoid => Ok(sample_sinusoid(rng)),
        Family::ConstrainedSynthetic => sample_constrained(rng),
        f => sample_dtlz_variant(f, regime, d, m, rng),
    }
}

/// Evaluates `n` design points and returns one dataset per output channel
/// (objectives first, then constraints). Sinusoid observations are noisy
/// and their datasets carry the noise variance.
pub fn generate_dataset(spec: &TaskSpec, n: usize, sampling: Sampling, rng: &mut RngStream) -> Result<Vec<Dataset>> {
    let xs = match sampling {
        Sampling::Lhs => lhs_sample(n, &spec.bounds, rng)?,
        Sampling::Uniform => uniform_sample(n, &spec.bounds, rng)?,
    };
    let mut channels = vec![Vec::with_capacity(n); spec.n_outputs()];
    for x in &xs {
        let noise = (spec.family == Family::Sinusoid).then_some(&mut *rng);
        let e = spec.evaluate(x, noise)?;
        for (c, v) in channels.iter_mut().zip(e.channels()) {
            c.push(v);
        }
    }
    let noise_var = if spec.family == Family::Sinusoid {
        SINUSOID_NOISE_STD * SINUSOID_NOISE_STD
    } else {
        0.0
    };
    channels
        .into_iter()
        .map(|ys| Ok(Dataset::new(xs.clone(), ys, spec.bounds.clone())?.with_noise_variance(noise_var)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_examples() {
        let s = sinusoid_spec(1.0, 1.0, 0.0);
        assert!((eval_sinusoid(&s, PI / 2.0, None) - 1.0).abs() < 1e-15);
        let s = sinusoid_spec(2.0, 1.0, PI);
        assert!(eval_sinusoid(&s, 0.0, None).abs() < 1e-15);
        let a = eval_sinusoid(&s, 1.0, Some(&mut RngStream::new(1, 2)));
        let b = eval_sinusoid(&s, 1.0, Some(&mut RngStream::new(1, 2)));
        assert_eq!(a, b);
    }

    #[test]
    fn sinusoid_sampling_ranges() {
        let mut rng = RngStream::new(3, 0);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let s = sample_sinusoid(&mut rng);
            assert!((0.1..=5.0).contains(&s.params[0]));
            assert!((0.999..=1.0).contains(&s.params[1]));
            assert!((0.0..=PI).contains(&s.params[2]));
            sum += s.params[0];
        }
        assert!((sum / 10_000.0 - 2.55).abs() < 0.05);
        assert_eq!(sample_sinusoid(&mut RngStream::new(4, 0)), sample_sinusoid(&mut RngStream::new(4, 0)));
    }

    #[test]
    fn variant_ranges() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..200 {
            let s = sample_dtlz_variant(Family::Dtlz1, Regime::InRange, 10, 3, &mut rng).unwrap();
            assert_eq!(s.params.len(), 3);
            assert!(s.dtlz_a().iter().all(|a| (0.1..=5.0).contains(a)));
            let s = sample_dtlz_variant(Family::Dtlz2, Regime::OutOfRange, 10, 3, &mut rng).unwrap();
            assert!(s.dtlz_a().iter().all(|a| (1.5..=5.0).contains(a)));
            assert!(s.dtlz_b().unwrap().iter().all(|b| (0.5..=1.5).contains(b)));
        }
        let c = canonical_dtlz(Family::Dtlz2, 10, 3).unwrap();
        assert_eq!(c.params, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(canonical_dtlz(Family::Dtlz7, 10, 3).unwrap().params, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn dtlz_examples() {
        let s = canonical_dtlz(Family::Dtlz1, 10, 3).unwrap();
        let mut x = vec![0.5; 10];
        x[0] = 0.3;
        x[1] = 0.9;
        assert_eq!(g_rastrigin(&x[2..]), 0.0);
        let f = eval_dtlz(&s, &x).unwrap().objectives;
        assert!((f.iter().sum::<f64>() - 0.5).abs() < 1e-12);

        let s = canonical_dtlz(Family::Dtlz2, 10, 3).unwrap();
        let mut x = vec![0.5; 10];
        x[0] = 0.0;
        x[1] = 0.0;
        let f = eval_dtlz(&s, &x).unwrap().objectives;
        assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15 && f[2].abs() < 1e-15);

        let s = canonical_dtlz(Family::Dtlz7, 10, 3).unwrap();
        let mut x = vec![0.0; 10];
        x[0] = 0.2;
        x[1] = 0.4;
        let f = eval_dtlz(&s, &x).unwrap().objectives;
        let h = 3.0 - (0.2 / 2.0) * (1.0 + (0.6 * PI).sin()) - (0.4 / 2.0) * (1.0 + (1.2 * PI).sin());
        assert_eq!(&f[..2], &[0.2, 0.4]);
        assert!((f[2] - 2.0 * h).abs() < 1e-12);

        assert!(matches!(eval_dtlz(&s, &[0.1; 4]), Err(Error::DimensionError { .. })));
        assert!(canonical_dtlz(Family::Dtlz2, 2, 3).is_err());
    }

    #[test]
    fn constrained_calibration() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..10 {
            let s = sample_constrained(&mut rng).unwrap();
            assert_eq!(s.params.len(), 6 + 6 + 24 + 4);
            let frac = feasible_fraction(&s, 10_000, &mut RngStream::new(99, 1));
            assert!((0.04..=0.51).contains(&frac), "{frac}");
            let cp = constrained_params(&s);
            for a in &cp.directions {
                assert!((crate::numkit::dot(a, a) - 1.0).abs() < 1e-12);
            }
            let at_o = eval_constrained(&s, cp.o);
            assert_eq!(at_o.objectives[0], 0.0);
            assert_eq!(at_o.feasible(), at_o.constraints.iter().all(|&g| g <= 0.0));
        }
        assert_eq!(
            sample_constrained(&mut RngStream::new(8, 0)).unwrap(),
            sample_constrained(&mut RngStream::new(8, 0)).unwrap()
        );
    }

    #[test]
    fn datasets_per_channel() {
        let mut rng = RngStream::new(9, 0);
        let s = canonical_dtlz(Family::Dtlz2, 10, 3).unwrap();
        let ds = generate_dataset(&s, 20, Sampling::Lhs, &mut rng).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.iter().all(|d| d.len() == 20 && d.xs == ds[0].xs));
        let c = sample_constrained(&mut rng).unwrap();
        assert_eq!(generate_dataset(&c, 1, Sampling::Uniform, &mut rng).unwrap().len(), 5);
        let sin = sample_sinusoid(&mut rng);
        assert_eq!(generate_dataset(&sin, 10, Sampling::Uniform, &mut rng).unwrap()[0].len(), 10);
    }

    #[test]
    fn spec_json_round_trip() {
        let s = sample_dtlz_variant(Family::Dtlz5, Regime::InRange, 10, 3, &mut RngStream::new(1, 1)).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"dtlz5\""));
        assert_eq!(serde_json::from_str::<TaskSpec>(&text).unwrap(), s);
        assert_eq!(Family::parse("DTLZ3").unwrap(), Family::Dtlz3);
        assert!(Family::parse("zdt1").is_err());
    }
}

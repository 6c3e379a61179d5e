//! Gaussian-process core over the deep kernel: concentrated likelihood with
//! gradients, fitting, posterior prediction and leave-one-out error.
//!
//! Inputs are min-max scaled to the unit box using the dataset bounds and
//! outputs are standardized per fitting dataset; the mean `μ̂` and process
//! variance `σ̂²` are replaced by their generalized-least-squares estimates.

use serde::{Deserialize, Serialize};

use crate::deepkernel::{
    accumulate_gradients, base_gradients, cross_correlations, kernel_matrix_from_features, BaseKernelParams,
    DeepKernelParams, TaskIncrements, THETA_MIN,
};
use crate::error::{Error, Result};
use crate::numkit::{cholesky_with_jitter, dot, Cholesky, Matrix};
use crate::optim::Adam;

pub const DEFAULT_NUGGET: f64 = 1e-8;
pub const MAX_NUGGET: f64 = 1e-4;
pub const SIGMA2_FLOOR: f64 = 1e-12;
const STD_FLOOR: f64 = 1e-12;
const BOUNDS_SLACK: f64 = 1e-9;

/// Observed pairs `(x, y)` of one output channel over a box domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    /// Known observation-noise variance in the units of `ys`; 0 for exact data.
    #[serde(default)]
    pub noise_var: f64,
}

impl Dataset {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let ds = Dataset {
            xs,
            ys,
            bounds,
            noise_var: 0.0,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Declares a known noise variance. Fits then use at least
    /// `noise_var / var(y)` as nugget on the standardized scale.
    pub fn with_noise_variance(mut self, noise_var: f64) -> Self {
        self.noise_var = noise_var;
        self
    }

    /// An empty dataset over `bounds`, to be grown with [`Dataset::push`].
    pub fn empty(bounds: Vec<(f64, f64)>) -> Self {
        Dataset {
            xs: Vec::new(),
            ys: Vec::new(),
            bounds,
            noise_var: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.xs.len() != self.ys.len() {
            return Err(Error::LengthMismatch(self.xs.len(), self.ys.len()));
        }
        if self.xs.is_empty() {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        crate::numkit::check_bounds(&self.bounds)?;
        for x in &self.xs {
            self.check_point(x)?;
        }
        if self.ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::Config("non-finite observation".into()));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::Config(format!("noise variance {} must be finite and nonnegative", self.noise_var)));
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.bounds.len() {
            return Err(Error::DimensionError {
                expected: self.bounds.len(),
                got: x.len(),
            });
        }
        for (k, (&v, &(lo, hi))) in x.iter().zip(&self.bounds).enumerate() {
            let slack = BOUNDS_SLACK * (hi - lo);
            if !(v >= lo - slack && v <= hi + slack) {
                return Err(Error::Config(format!(
                    "coordinate {k} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        self.check_point(&x)?;
        self.xs.push(x);
        self.ys.push(y);
        Ok(())
    }

    /// The dataset with point `i` removed.
    pub fn without(&self, i: usize) -> Dataset {
        let mut out = self.clone();
        out.xs.remove(i);
        out.ys.remove(i);
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            xs: idx.iter().map(|&i| self.xs[i].clone()).collect(),
            ys: idx.iter().map(|&i| self.ys[i]).collect(),
            bounds: self.bounds.clone(),
            noise_var: self.noise_var,
        }
    }

    /// Maps `x` into the unit box.
    pub fn scale(&self, x: &[f64]) -> Vec<f64> {
        scale_point(&self.bounds, x)
    }
}

fn scale_point(bounds: &[(f64, f64)], x: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(v, &(lo, hi))| (v - lo) / (hi - lo))
        .collect()
}

/// Zero-mean unit-variance outputs plus the constants to undo it.
fn standardize(ys: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    (ys.iter().map(|y| (y - mean) / std).collect(), mean, std)
}

/// Nugget on the standardized scale: the requested value, raised to cover
/// the dataset's known noise.
fn effective_nugget(nugget: f64, data: &Dataset, y_std: f64) -> f64 {
    if data.noise_var > 0.0 {
        nugget.max(data.noise_var / (y_std * y_std))
    } else {
        nugget
    }
}

/// Factorizes `R + nugget·I`, escalating the nugget ×10 up to 1e-4.
fn factorize(kernel_no_nugget: &Matrix, nugget: f64) -> Result<(Cholesky, f64)> {
    let mut eta = nugget;
    loop {
        match cholesky_with_jitter(kernel_no_nugget, eta) {
            Ok(c) => return Ok((c, eta)),
            Err(e) => {
                let next = if eta > 0.0 { eta * 10.0 } else { DEFAULT_NUGGET };
                if next > MAX_NUGGET * (1.0 + 1e-12) {
                    return Err(e);
                }
                eta = next;
            }
        }
    }
}

/// GLS mean, process variance and `R⁻¹(y - 1μ̂)`.
fn concentrate(chol: &Cholesky, y: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = y.len();
    let ones = vec![1.0; n];
    let r_inv_one = chol.solve(&ones);
    let r_inv_y = chol.solve(y);
    let mu = r_inv_y.iter().sum::<f64>() / r_inv_one.iter().sum::<f64>();
    let resid: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let alpha: Vec<f64> = r_inv_y
        .iter()
        .zip(&r_inv_one)
        .map(|(a, b)| a - mu * b)
        .collect();
    let sigma2 = (dot(&resid, &alpha) / n as f64).max(SIGMA2_FLOOR);
    (mu, sigma2, alpha)
}

/// A fitted Gaussian process, self-contained for prediction.
#[derive(Debug, Clone)]
pub struct GpState {
    /// Effective kernel parameters (increments already applied).
    pub params: DeepKernelParams,
    pub chol: Cholesky,
    pub mu_hat: f64,
    pub sigma2_hat: f64,
    pub y_mean: f64,
    pub y_std: f64,
    /// Training inputs in the unit box.
    pub xs: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub nugget: f64,
    pub bounds: Vec<(f64, f64)>,
    features: Vec<Vec<f64>>,
    theta: Vec<f64>,
}

pub fn fit_gp(params: &DeepKernelParams, increments: &TaskIncrements, data: &Dataset, nugget: f64) -> Result<GpState> {
    if data.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: data.len(),
        });
    }
    let eff = params.with_increments(increments);
    let xs: Vec<Vec<f64>> = data.xs.iter().map(|x| data.scale(x)).collect();
    let features = eff.features(&xs)?;
    let k = kernel_matrix_from_features(&eff.base, &features, 0.0);
    let (y, y_mean, y_std) = standardize(&data.ys);
    let (chol, nugget) = factorize(&k, effective_nugget(nugget, data, y_std))?;
    let (mu_hat, sigma2_hat, alpha) = concentrate(&chol, &y);
    let theta = eff.base.theta();
    Ok(GpState {
        params: eff,
        chol,
        mu_hat,
        sigma2_hat,
        y_mean,
        y_std,
        xs,
        alpha,
        nugget,
        bounds: data.bounds.clone(),
        features,
        theta,
    })
}

impl GpState {
    /// Posterior mean and variance at `x`, in the units of the observations.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let xs = scale_point(&self.bounds, x);
        let f = match self.params.mlp.forward(&xs) {
            Ok(f) => f,
            Err(_) => return (f64::NAN, f64::NAN),
        };
        let r = cross_correlations(&self.params.base, &self.theta, &f, &self.features);
        let mean = self.mu_hat + dot(&r, &self.alpha);
        let v = self.chol.solve_lower(&r);
        let var = (self.sigma2_hat * (1.0 - dot(&v, &v))).max(0.0);
        (mean * self.y_std + self.y_mean, var * self.y_std * self.y_std)
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }
}

pub fn predict(state: &GpState, x: &[f64]) -> (f64, f64) {
    state.predict(x)
}

/// Which gradients [`nll_eval`] should assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientScope {
    None,
    /// `log θ` and `p` only; the feature network is treated as frozen.
    Kernel,
    Full,
}

/// Gradients of the negative log-likelihood. `params.base` and `increments`
/// carry the same values because the increments enter additively.
#[derive(Debug, Clone)]
pub struct NllGradients {
    pub params: DeepKernelParams,
    pub increments: TaskIncrements,
}

pub(crate) fn nll_eval(
    params: &DeepKernelParams,
    increments: &TaskIncrements,
    data: &Dataset,
    nugget: f64,
    scope: GradientScope,
) -> Result<(f64, Option<NllGradients>)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let eff = params.with_increments(increments);
    let xs: Vec<Vec<f64>> = data.xs.iter().map(|x| data.scale(x)).collect();
    let mut feats = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for x in &xs {
        if scope == GradientScope::Full {
            let (f, t) = eff.mlp.forward_traced(x)?;
            feats.push(f);
            traces.push(t);
        } else {
            feats.push(eff.mlp.forward(x)?);
        }
    }
    let k = kernel_matrix_from_features(&eff.base, &feats, 0.0);
    let (y, _, y_std) = standardize(&data.ys);
    let (chol, _) = factorize(&k, effective_nugget(nugget, data, y_std))?;
    let (_, sigma2, alpha) = concentrate(&chol, &y);
    let nf = n as f64;
    let value = 0.5 * nf * (2.0 * std::f64::consts::PI * sigma2).ln() + 0.5 * chol.log_det() + 0.5 * nf;
    if scope == GradientScope::None {
        return Ok((value, None));
    }
    // ∂L/∂R = ½ (R⁻¹ - α αᵀ / σ̂²)
    let mut cot = chol.inverse();
    for i in 0..n {
        for j in 0..n {
            cot[(i, j)] = 0.5 * (cot[(i, j)] - alpha[i] * alpha[j] / sigma2);
        }
    }
    let grad = match scope {
        GradientScope::Full => accumulate_gradients(&eff, &feats, &traces, &k, &cot),
        _ => {
            let fg = base_gradients(&eff.base, &feats, &k, &cot, false);
            let mut g = eff.zeros_like();
            g.base.log_theta = fg.log_theta;
            g.base.p = fg.p;
            g
        }
    };
    let increments = TaskIncrements {
        delta_log_theta: grad.base.log_theta.clone(),
        delta_p: grad.base.p.clone(),
    };
    Ok((
        value,
        Some(NllGradients {
            params: grad,
            increments,
        }),
    ))
}

/// Concentrated negative log-likelihood `n/2·ln(2πσ̂²) + ½·ln|R| + n/2` and
/// its gradients with respect to every kernel parameter and increment.
pub fn neg_log_likelihood(
    params: &DeepKernelParams,
    increments: &TaskIncrements,
    data: &Dataset,
    nugget: f64,
) -> Result<(f64, NllGradients)> {
    let (v, g) = nll_eval(params, increments, data, nugget, GradientScope::Full)?;
    Ok((v, g.expect("full scope yields gradients")))
}

pub fn nll_value(params: &DeepKernelParams, increments: &TaskIncrements, data: &Dataset, nugget: f64) -> Result<f64> {
    Ok(nll_eval(params, increments, data, nugget, GradientScope::None)?.0)
}

/// Mean squared leave-one-out prediction error, by `n` refits.
pub fn loo_mse(params: &DeepKernelParams, increments: &TaskIncrements, data: &Dataset, nugget: f64) -> Result<f64> {
    let n = data.len();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    let mut total = 0.0;
    for i in 0..n {
        let state = fit_gp(params, increments, &data.without(i), nugget)?;
        let (m, _) = state.predict(&data.xs[i]);
        total += (m - data.ys[i]) * (m - data.ys[i]);
    }
    Ok(total / n as f64)
}

/// Settings for maximum-likelihood fitting of a plain (identity-feature) GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub steps: usize,
    pub lr: f64,
    /// Starting values of `θ` (shared by all dimensions); the best final
    /// likelihood wins.
    pub theta_starts: Vec<f64>,
    pub p_start: f64,
    pub theta_max: f64,
    pub nugget: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            steps: 150,
            lr: 0.05,
            theta_starts: vec![0.1, 1.0, 10.0],
            p_start: 1.9,
            theta_max: 100.0,
            nugget: DEFAULT_NUGGET,
        }
    }
}

fn project(base: &mut BaseKernelParams, theta_max: f64) {
    let (lo, hi) = (THETA_MIN.ln(), theta_max.ln());
    for l in &mut base.log_theta {
        *l = l.clamp(lo, hi);
    }
    for p in &mut base.p {
        *p = p.clamp(1.0, 2.0);
    }
}

/// Projected-Adam likelihood fit of `θ, p` for an identity-feature GP.
/// `warm` adds the previous optimum as an extra start.
pub fn fit_mle_gp(data: &Dataset, cfg: &MleConfig, warm: Option<&BaseKernelParams>) -> Result<(BaseKernelParams, GpState)> {
    let d = data.dim();
    let zero = TaskIncrements::zeros(d);
    let mut starts: Vec<BaseKernelParams> = cfg
        .theta_starts
        .iter()
        .map(|&t| BaseKernelParams::uniform(d, t, cfg.p_start))
        .collect();
    if let Some(w) = warm {
        starts.push(w.clone());
    }
    let mut best: Option<(f64, BaseKernelParams)> = None;
    for mut base in starts {
        project(&mut base, cfg.theta_max);
        let mut adam = Adam::new(2 * d, cfg.lr);
        let mut flat = base.log_theta.clone();
        flat.extend_from_slice(&base.p);
        let mut best_here: Option<(f64, BaseKernelParams)> = None;
        for step in 0..=cfg.steps {
            let params = DeepKernelParams::identity(base.clone());
            let scope = if step == cfg.steps {
                GradientScope::None
            } else {
                GradientScope::Kernel
            };
            let (value, grad) = match nll_eval(&params, &zero, data, cfg.nugget, scope) {
                Ok(r) => r,
                Err(Error::NotPositiveDefinite { .. }) => break,
                Err(e) => return Err(e),
            };
            if best_here.as_ref().is_none_or(|(v, _)| value < *v) {
                best_here = Some((value, base.clone()));
            }
            let Some(grad) = grad else { break };
            let mut g = grad.params.base.log_theta;
            g.extend_from_slice(&grad.params.base.p);
            adam.step(&mut flat, &g);
            base.log_theta.copy_from_slice(&flat[..d]);
            base.p.copy_from_slice(&flat[d..]);
            project(&mut base, cfg.theta_max);
            flat[..d].copy_from_slice(&base.log_theta);
            flat[d..].copy_from_slice(&base.p);
        }
        if let Some((v, b)) = best_here {
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, b));
            }
        }
    }
    let (_, base) = best.ok_or(Error::NotPositiveDefinite { row: 0, pivot: 0.0 })?;
    let state = fit_gp(&DeepKernelParams::identity(base.clone()), &zero, data, cfg.nugget)?;
    Ok((base, state))
}

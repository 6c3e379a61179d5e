//! Task-specific adaptation of experiences and the MSE-gated update that
//! keeps a surrogate in step with a growing archive.

use serde::{Deserialize, Serialize};

use crate::deepkernel::{DeepKernelParams, TaskIncrements};
use crate::error::{Error, Result};
use crate::gp::{fit_gp, loo_mse, nll_eval, Dataset, GpState, GradientScope, DEFAULT_NUGGET};
use crate::meta::ExperienceParams;
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr_beta: f64,
    /// Steps of the initial adaptation.
    pub adapt_steps: usize,
    /// Steps of the candidate adaptation inside [`Surrogate::update`].
    pub update_steps: usize,
    pub nugget: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr_beta: 0.001,
            adapt_steps: 100,
            update_steps: 10,
            nugget: DEFAULT_NUGGET,
        }
    }
}

/// A meta-learned surrogate for one output channel: frozen experiences plus
/// per-task increments, fitted on the data it was last adapted to.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub experience: ExperienceParams,
    pub increments: Option<TaskIncrements>,
    pub state: Option<GpState>,
    pub config: AdaptConfig,
    pub archive: Dataset,
}

/// Outcome of one gated update, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub e0: f64,
    /// `+inf` when the candidate could not be built.
    pub e1: f64,
    pub accepted: bool,
    pub increments_before: TaskIncrements,
    pub increments_after: TaskIncrements,
}

impl Surrogate {
    pub fn new(experience: ExperienceParams, config: AdaptConfig) -> Self {
        let bounds = vec![(0.0, 1.0); experience.dim()];
        Surrogate {
            experience,
            increments: None,
            state: None,
            config,
            archive: Dataset::empty(bounds),
        }
    }

    /// Current increments, zero if none were initialized yet.
    pub fn current_increments(&self) -> TaskIncrements {
        self.increments
            .clone()
            .unwrap_or_else(|| TaskIncrements::zeros(self.experience.dim()))
    }

    /// Experience parameters with the increments applied.
    pub fn effective_params(&self) -> DeepKernelParams {
        self.experience.params.with_increments(&self.current_increments())
    }

    /// Adapts the increments to `data` with the configured number of steps.
    pub fn adapt(&self, data: &Dataset) -> Result<Surrogate> {
        self.adapt_steps(data, self.config.adapt_steps)
    }

    /// Adam on the increments only; network and experience kernel
    /// parameters stay frozen. The state is refit on `data` afterwards.
    pub fn adapt_steps(&self, data: &Dataset, steps: usize) -> Result<Surrogate> {
        if data.len() < 2 {
            return Err(Error::TooFewPoints { needed: 2, got: data.len() });
        }
        let params = &self.experience.params;
        let mut inc = self.current_increments();
        if steps > 0 && self.config.lr_beta != 0.0 {
            let mut flat = inc.to_flat();
            let mut adam = Adam::new(flat.len(), self.config.lr_beta);
            for _ in 0..steps {
                let (loss, g) = nll_eval(params, &inc, data, self.config.nugget, GradientScope::Kernel)?;
                let g = g.expect("kernel scope yields gradients").increments.to_flat();
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    break;
                }
                adam.step(&mut flat, &g);
                inc = project(params, TaskIncrements::from_flat(&flat));
                flat = inc.to_flat();
            }
        }
        let state = fit_gp(params, &inc, data, self.config.nugget)?;
        Ok(Surrogate {
            experience: self.experience.clone(),
            increments: Some(inc),
            state: Some(state),
            config: self.config.clone(),
            archive: data.clone(),
        })
    }

    /// Adapts a candidate on `archive` and keeps it only if its
    /// leave-one-out error is strictly below the current one. A refused
    /// candidate leaves the increments untouched and only refits the state.
    pub fn update(&self, archive: &Dataset) -> Result<(Surrogate, UpdateRecord)> {
        if archive.len() < 3 {
            return Err(Error::TooFewPoints { needed: 3, got: archive.len() });
        }
        let before = self.current_increments();
        let params = &self.experience.params;
        let e0 = loo_mse(params, &before, archive, self.config.nugget)?;
        let candidate = self
            .adapt_steps(archive, self.config.update_steps)
            .and_then(|c| {
                let e1 = loo_mse(params, &c.current_increments(), archive, self.config.nugget)?;
                Ok((c, e1))
            });
        let (candidate, e1) = match candidate {
            Ok((c, e1)) if e1.is_finite() => (Some(c), e1),
            _ => (None, f64::INFINITY),
        };
        let (next, accepted) = match candidate {
            Some(c) if accepts(e0, e1) => (c, true),
            _ => (self.refit(archive)?, false),
        };
        let record = UpdateRecord {
            e0,
            e1,
            accepted,
            increments_before: before,
            increments_after: next.current_increments(),
        };
        Ok((next, record))
    }

    /// Refits the state on `data` keeping every parameter as is.
    pub fn refit(&self, data: &Dataset) -> Result<Surrogate> {
        let state = fit_gp(
            &self.experience.params,
            &self.current_increments(),
            data,
            self.config.nugget,
        )?;
        let mut out = self.clone();
        out.state = Some(state);
        out.archive = data.clone();
        Ok(out)
    }

    /// Posterior mean and variance; `None` before the first fit.
    pub fn predict(&self, x: &[f64]) -> Option<(f64, f64)> {
        self.state.as_ref().map(|s| s.predict(x))
    }
}

/// Gate of the update: strict improvement only, ties roll back.
pub fn accepts(e0: f64, e1: f64) -> bool {
    e0 > e1
}

/// Keeps `base + inc` inside the admissible box by moving the increment.
fn project(params: &DeepKernelParams, inc: TaskIncrements) -> TaskIncrements {
    let eff = params.base.with_increments(&inc);
    TaskIncrements {
        delta_log_theta: eff
            .log_theta
            .iter()
            .zip(&params.base.log_theta)
            .map(|(e, b)| e - b)
            .collect(),
        delta_p: eff.p.iter().zip(&params.base.p).map(|(e, b)| e - b).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::nll_value;
    use crate::numkit::RngStream;

    fn sine_data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, 0);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.uniform_in(-5.0, 5.0)]).collect();
        let ys = xs.iter().map(|x| 2.0 * (x[0] + 0.5).sin()).collect();
        Dataset::new(xs, ys, vec![(-5.0, 5.0)]).unwrap()
    }

    fn surrogate(cfg: AdaptConfig) -> Surrogate {
        let params = DeepKernelParams::init(1, &mut RngStream::new(9, 0));
        Surrogate::new(ExperienceParams::new(params), cfg)
    }

    #[test]
    fn zero_rate_keeps_zero_increments() {
        let s = surrogate(AdaptConfig {
            lr_beta: 0.0,
            ..AdaptConfig::default()
        });
        let data = sine_data(10, 1);
        let a = s.adapt(&data).unwrap();
        assert!(a.current_increments().is_zero());
        let direct = fit_gp(&s.experience.params, &TaskIncrements::zeros(1), &data, DEFAULT_NUGGET).unwrap();
        for x in [-4.0, 0.3, 2.2] {
            assert_eq!(a.predict(&[x]).unwrap(), direct.predict(&[x]));
        }
    }

    #[test]
    fn zero_steps_only_refits() {
        let s = surrogate(AdaptConfig {
            adapt_steps: 0,
            ..AdaptConfig::default()
        });
        let a = s.adapt(&sine_data(6, 2)).unwrap();
        assert!(a.current_increments().is_zero());
        assert!(a.state.is_some());
        assert_eq!(a.archive.len(), 6);
    }

    #[test]
    fn adaptation_does_not_raise_loss_and_freezes_experience() {
        let s = surrogate(AdaptConfig {
            lr_beta: 0.01,
            ..AdaptConfig::default()
        });
        let data = sine_data(10, 3);
        let before = nll_value(&s.experience.params, &TaskIncrements::zeros(1), &data, DEFAULT_NUGGET).unwrap();
        let a = s.adapt(&data).unwrap();
        let after = nll_value(&a.experience.params, &a.current_increments(), &data, DEFAULT_NUGGET).unwrap();
        assert!(after <= before, "{after} > {before}");
        assert_eq!(a.experience, s.experience);
        assert!(!a.current_increments().is_zero());
    }

    #[test]
    fn update_is_gated_by_loo_error() {
        let s = surrogate(AdaptConfig {
            lr_beta: 0.05,
            ..AdaptConfig::default()
        });
        let a = s.adapt(&sine_data(8, 4)).unwrap();
        for seed in 5..9 {
            let archive = sine_data(12, seed);
            let (next, rec) = a.update(&archive).unwrap();
            let e_after = loo_mse(&next.experience.params, &next.current_increments(), &archive, DEFAULT_NUGGET).unwrap();
            assert!(e_after <= rec.e0);
            if rec.accepted {
                assert!(rec.e1 < rec.e0);
            } else {
                assert_eq!(rec.increments_after, rec.increments_before);
                assert_eq!(next.increments, a.increments);
            }
            assert_eq!(next.experience, a.experience);
            assert_eq!(next.archive.len(), 12);
        }
    }

    #[test]
    fn gate_branches() {
        assert!(accepts(0.5, 0.3));
        assert!(!accepts(0.3, 0.5));
        assert!(!accepts(0.3, 0.3));
        assert!(!accepts(0.3, f64::INFINITY));
    }

    #[test]
    fn update_needs_three_points() {
        let s = surrogate(AdaptConfig::default());
        assert!(matches!(s.update(&sine_data(2, 1)), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn increments_stay_admissible() {
        let s = surrogate(AdaptConfig {
            lr_beta: 5.0,
            adapt_steps: 20,
            ..AdaptConfig::default()
        });
        let a = s.adapt(&sine_data(10, 6)).unwrap();
        let eff = a.effective_params();
        assert!(eff.base.validate().is_ok());
        let raw_p = s.experience.params.base.p[0] + a.current_increments().delta_p[0];
        assert!((1.0..=2.0).contains(&raw_p));
    }
}

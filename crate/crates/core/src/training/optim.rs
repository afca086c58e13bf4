use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Radam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecaySchedule {
    PerEpoch,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Decoupled shrinkage `p ← p·(1 − weight_decay)`.
    pub weight_decay: f64,
    pub weight_decay_schedule: WeightDecaySchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1.3e-4,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 1e-5,
            weight_decay_schedule: WeightDecaySchedule::PerEpoch,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(invalid(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid("epsilon must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(invalid(format!("weight_decay must be in [0, 1), got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Length of the approximated simple moving average after `t` steps.
pub fn radam_rho(t: u64, beta2: f64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powf(t as f64);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// Whether step `t` uses the variance-rectified update.
pub fn radam_rectified(t: u64, beta2: f64) -> bool {
    radam_rho(t, beta2) > 4.0
}

#[derive(Debug, Clone)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam / RAdam with per-tensor step counters, so tensors that join late
/// (the delayed regressor) get their own bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            state: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Step counter of tensor `index` (0 before its first update).
    pub fn steps_taken(&self, index: usize) -> u64 {
        self.state.get(index).and_then(|s| s.as_ref()).map_or(0, |s| s.step)
    }

    /// One update of every `(index, param)` with `active` set. Indices
    /// identify tensors across calls. Non-trainable tensors are skipped.
    pub fn step<T: Scalar>(&mut self, params: Vec<(bool, &mut Param<T>)>) -> Result<()> {
        for (_, p) in &params {
            if let Some(bad) = p.grad.iter().position(|g| !g.as_f64().is_finite()) {
                return Err(Error::Divergence {
                    epoch: 0,
                    detail: format!("non-finite gradient in `{}`[{bad}]", p.name),
                });
            }
        }
        if self.state.len() < params.len() {
            self.state.resize(params.len(), None);
        }
        let OptimizerConfig {
            kind,
            learning_rate: lr,
            betas: (b1, b2),
            epsilon: eps,
            weight_decay,
            weight_decay_schedule,
        } = self.config;
        for (idx, (active, p)) in params.into_iter().enumerate() {
            if !active || !p.trainable {
                continue;
            }
            let st = self.state[idx].get_or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            assert_eq!(st.m.len(), p.len(), "tensor {} changed size", p.name);
            st.step += 1;
            let t = st.step;
            let bc1 = 1.0 - b1.powf(t as f64);
            let bc2 = 1.0 - b2.powf(t as f64);
            let rect = match kind {
                OptimizerKind::Adam => None,
                OptimizerKind::Radam => {
                    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                    let rho = radam_rho(t, b2);
                    (rho > 4.0).then(|| {
                        ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
                    })
                }
            };
            for i in 0..p.len() {
                let g = p.grad[i].as_f64();
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let m_hat = st.m[i] / bc1;
                let update = match (kind, rect) {
                    (OptimizerKind::Adam, _) => m_hat / ((st.v[i] / bc2).sqrt() + eps),
                    (OptimizerKind::Radam, Some(r)) => r * m_hat * bc2.sqrt() / (st.v[i].sqrt() + eps),
                    (OptimizerKind::Radam, None) => m_hat,
                };
                let mut value = p.value[i].as_f64() - lr * update;
                if weight_decay_schedule == WeightDecaySchedule::PerStep {
                    value *= 1.0 - weight_decay;
                }
                p.value[i] = T::of(value);
            }
        }
        Ok(())
    }

    /// Per-epoch decoupled weight decay over the active trainable tensors.
    pub fn end_epoch<T: Scalar>(&self, params: Vec<(bool, &mut Param<T>)>) {
        if self.config.weight_decay_schedule != WeightDecaySchedule::PerEpoch || self.config.weight_decay == 0.0 {
            return;
        }
        let keep = T::of(1.0 - self.config.weight_decay);
        for (active, p) in params {
            if active && p.trainable {
                p.value.iter_mut().for_each(|v| *v *= keep);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Radam] {
            let mut opt = Optimizer::new(OptimizerConfig {
                kind,
                weight_decay: 0.0,
                ..Default::default()
            })
            .unwrap();
            let mut p = Param::<f64>::filled("p", &[3], 0.7);
            for _ in 0..6 {
                opt.step(vec![(true, &mut p)]).unwrap();
                opt.end_epoch(vec![(true, &mut p)]);
            }
            assert!(p.value.iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let mut p = Param::<f32>::zeros("p", &[2]);
        p.grad[1] = f32::NAN;
        assert!(matches!(opt.step(vec![(true, &mut p)]), Err(Error::Divergence { .. })));
    }

    #[test]
    fn inactive_tensors_are_untouched() {
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let mut p = Param::<f64>::filled("p", &[2], 1.0);
        p.grad = vec![1.0, -1.0];
        opt.step(vec![(false, &mut p)]).unwrap();
        opt.end_epoch(vec![(false, &mut p)]);
        assert_eq!(p.value, vec![1.0, 1.0]);
        assert_eq!(opt.steps_taken(0), 0);
    }
}

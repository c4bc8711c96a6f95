use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every tensor of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, hyper: AdamW) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Decoupled decay `p -= lr·λ·p`, then the bias-corrected Adam update.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TrainError::Contract(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, name, t) in store.iter() {
            let g = &grads[id.index()];
            if g.len() != t.len() || self.m[id.index()].len() != t.len() {
                return Err(TrainError::Contract(format!("gradient shape mismatch for {name}")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    param: name.to_string(),
                });
            }
        }
        self.step += 1;
        let AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for (j, &g) in grads[i].iter().enumerate() {
                p[j] -= lr * weight_decay * p[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    #[default]
    Epoch,
    Step,
}

/// Cosine annealing with warm restarts; `progress` counts cycles in the
/// schedule's unit (epochs by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleState {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t0: f64,
    pub t_mult: f64,
    pub unit: ScheduleUnit,
    pub progress: f64,
}

impl Default for ScheduleState {
    fn default() -> Self {
        Self {
            eta_max: 5e-5,
            eta_min: 0.0,
            t0: 7.0,
            t_mult: 1.0,
            unit: ScheduleUnit::Epoch,
            progress: 0.0,
        }
    }
}

impl ScheduleState {
    pub fn validate(&self) -> Result<()> {
        if [self.t0, self.t_mult].iter().any(|v| v.is_nan() || *v < 1.0) {
            return Err(TrainError::Contract(format!(
                "T0 {} and T_mult {} must be >= 1",
                self.t0, self.t_mult
            )));
        }
        if !(self.eta_max >= self.eta_min && self.eta_min >= 0.0 && self.eta_max.is_finite()) {
            return Err(TrainError::Contract(format!(
                "learning rates need 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        cosine_warm_restart_lr(self, self.progress)
    }

    pub fn advance(&mut self, amount: f64) {
        self.progress += amount;
    }
}

/// `η_min + ½(η_max−η_min)(1 + cos(π·T_cur/T_i))` with `T_cur` reset at
/// each restart and cycle lengths growing by `T_mult`.
pub fn cosine_warm_restart_lr(state: &ScheduleState, progress: f64) -> f64 {
    let progress = progress.max(0.0);
    let (t_cur, t_i) = if state.t_mult == 1.0 {
        (progress % state.t0, state.t0)
    } else {
        let mut t_cur = progress;
        let mut t_i = state.t0;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= state.t_mult;
        }
        (t_cur, t_i)
    };
    state.eta_min + 0.5 * (state.eta_max - state.eta_min) * (1.0 + (PI * t_cur / t_i).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = OptimizerState::new(&s, AdamW::default());
        let err = opt.step(&mut s, &[vec![0.0, f64::NAN]], 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGrad { ref param } if param == "w"));
        assert_eq!(opt.step, 0);
        assert_eq!(s.iter().next().unwrap().2.data(), &[1.0, 2.0]);
    }

    #[test]
    fn geometric_cycles_restart_at_cumulative_lengths() {
        let st = ScheduleState {
            t0: 2.0,
            t_mult: 2.0,
            eta_max: 1.0,
            ..ScheduleState::default()
        };
        for boundary in [0.0, 2.0, 6.0, 14.0] {
            assert_eq!(cosine_warm_restart_lr(&st, boundary), 1.0);
        }
        assert!((cosine_warm_restart_lr(&st, 4.0) - 0.5).abs() < 1e-15);
    }
}

//! First-order optimizers applied to a model's aggregated update.

use serde::{Deserialize, Serialize};

use crate::models::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_eta() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_eta", alias = "lr")]
    pub eta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            eta: default_eta(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(eta: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            eta,
            ..Default::default()
        }
    }

    pub fn adam(eta: f64) -> Self {
        OptimizerConfig {
            eta,
            ..Default::default()
        }
    }

    pub fn new_state(&self, num_params: usize) -> OptimizerState {
        match self.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            },
        }
    }
}

/// Per-model optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u32,
    },
}

/// The update or the resulting parameters contained NaN or infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFinite;

impl OptimizerState {
    /// Applies one descent step along `update` and returns the new parameters.
    /// The state is left untouched if the step would produce a non-finite value.
    pub fn step(
        &mut self,
        params: &ParamVector,
        update: &[f64],
        eta: f64,
    ) -> Result<ParamVector, NonFinite> {
        if update.len() != params.len() || update.iter().any(|u| !u.is_finite()) {
            return Err(NonFinite);
        }
        let next = match self {
            OptimizerState::Sgd => {
                let mut next = params.clone();
                next.add_scaled(update, -eta);
                next
            }
            OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                let step = *t + 1;
                let bc1 = 1.0 - beta1.powi(step as i32);
                let bc2 = 1.0 - beta2.powi(step as i32);
                let mut new_m = m.clone();
                let mut new_v = v.clone();
                let mut next = params.clone();
                for k in 0..update.len() {
                    let g = update[k];
                    new_m[k] = *beta1 * m[k] + (1.0 - *beta1) * g;
                    new_v[k] = *beta2 * v[k] + (1.0 - *beta2) * g * g;
                    let m_hat = new_m[k] / bc1;
                    let v_hat = new_v[k] / bc2;
                    next[k] -= eta * m_hat / (v_hat.sqrt() + *eps);
                }
                if !next.is_finite() {
                    return Err(NonFinite);
                }
                *m = new_m;
                *v = new_v;
                *t = step;
                return Ok(next);
            }
        };
        if next.is_finite() {
            Ok(next)
        } else {
            Err(NonFinite)
        }
    }
}

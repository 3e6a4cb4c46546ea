//! First-order optimizers: SGD with momentum, Adam, Nadam, RMSProp.
//!
//! One [`OptState`] tracks per-parameter moment buffers plus a shared step
//! counter that advances once per `backward_and_step` call.
#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
    Nadam,
    Rmsprop,
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Result<OptimizerKind> {
        match name {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            "nadam" => Ok(OptimizerKind::Nadam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::InvalidInput(format!("unknown optimizer {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Nadam => "nadam",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD velocity coefficient.
    pub momentum: f64,
    /// Adam/Nadam first-moment decay.
    pub beta1: f64,
    /// Adam/Nadam second-moment decay.
    pub beta2: f64,
    /// RMSProp decay.
    pub rho: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<OptimizerConfig> {
        if learning_rate <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "learning_rate must be > 0, got {learning_rate}"
            )));
        }
        Ok(OptimizerConfig {
            kind,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            epsilon: 1e-8,
        })
    }
}

/// Moment buffers matching a model's parameter tensors, in parameter order.
#[derive(Debug, Clone)]
pub struct OptState {
    pub(crate) t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptState {
    pub fn for_params(param_lens: &[usize]) -> OptState {
        OptState {
            t: 0,
            first: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            second: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Apply one update to every parameter tensor. `params` and `grads` must
/// match the order the state was created with.
pub fn update_params(
    cfg: &OptimizerConfig,
    state: &mut OptState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(Error::StaleCache(format!(
            "optimizer state holds {} slots, got {} params and {} grads",
            state.first.len(),
            params.len(),
            grads.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = cfg.learning_rate;
    for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.len() != grad.len() || param.len() != state.first[slot].len() {
            return Err(Error::StaleCache(format!(
                "parameter {slot} length changed since state creation"
            )));
        }
        let m = &mut state.first[slot];
        let v = &mut state.second[slot];
        match cfg.kind {
            OptimizerKind::SgdMomentum => {
                for i in 0..param.len() {
                    m[i] = cfg.momentum * m[i] + grad.data[i];
                    param.data[i] -= lr * m[i];
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..param.len() {
                    let g = grad.data[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    param.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }
            OptimizerKind::Nadam => {
                // Nesterov-corrected first moment: the lookahead term
                // beta1 * m_hat + (1 - beta1) * g / (1 - beta1^t) replaces
                // Adam's m_hat.
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..param.len() {
                    let g = grad.data[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    let lookahead = cfg.beta1 * m_hat + (1.0 - cfg.beta1) * g / bc1;
                    param.data[i] -= lr * lookahead / (v_hat.sqrt() + cfg.epsilon);
                }
            }
            OptimizerKind::Rmsprop => {
                for i in 0..param.len() {
                    let g = grad.data[i];
                    v[i] = cfg.rho * v[i] + (1.0 - cfg.rho) * g * g;
                    param.data[i] -= lr * g / (v[i].sqrt() + cfg.epsilon);
                }
            }
        }
    }
    Ok(())
}

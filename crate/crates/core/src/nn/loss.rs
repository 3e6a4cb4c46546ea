//! Batch losses over softmax outputs and their gradients with respect to the
//! pre-softmax logits.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CategoricalCrossentropy,
    KullbackLeiblerDivergence,
    Poisson,
}

impl LossKind {
    pub fn parse(name: &str) -> Result<LossKind> {
        match name {
            "categorical_crossentropy" => Ok(LossKind::CategoricalCrossentropy),
            "kullback_leibler_divergence" => Ok(LossKind::KullbackLeiblerDivergence),
            "poisson" => Ok(LossKind::Poisson),
            other => Err(Error::InvalidInput(format!("unknown loss {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CategoricalCrossentropy => "categorical_crossentropy",
            LossKind::KullbackLeiblerDivergence => "kullback_leibler_divergence",
            LossKind::Poisson => "poisson",
        }
    }
}

/// Mean-over-batch loss and its gradient w.r.t. the logits.
///
/// CE = -sum t ln p; KL = sum t ln(t/p) with 0 ln 0 = 0; Poisson =
/// sum (p - t ln p). For targets summing to 1 all three share the logit
/// gradient (p - t) / B; the Poisson form below also covers unnormalized
/// nonnegative targets.
pub fn compute_loss(
    kind: LossKind,
    predicted: &Tensor,
    target: &Tensor,
) -> Result<(f64, Tensor)> {
    if predicted.shape != target.shape || predicted.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "predicted {:?} vs target {:?}",
            predicted.shape, target.shape
        )));
    }
    let (batch, classes) = (predicted.shape[0], predicted.shape[1]);
    if batch == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let inv_b = 1.0 / batch as f64;
    let mut grad = Tensor::zeros(&predicted.shape);
    let mut total = 0.0;
    for r in 0..batch {
        let p = predicted.row(r);
        let t = target.row(r);
        let mut row_loss = 0.0;
        let t_sum: f64 = t.iter().sum();
        for j in 0..classes {
            let pc = p[j].max(PROB_FLOOR);
            match kind {
                LossKind::CategoricalCrossentropy => {
                    row_loss -= t[j] * pc.ln();
                    grad.data[r * classes + j] = (p[j] - t[j]) * inv_b;
                }
                LossKind::KullbackLeiblerDivergence => {
                    if t[j] > 0.0 {
                        row_loss += t[j] * (t[j].ln() - pc.ln());
                    }
                    grad.data[r * classes + j] = (p[j] - t[j]) * inv_b;
                }
                LossKind::Poisson => {
                    row_loss += p[j] - t[j] * pc.ln();
                    grad.data[r * classes + j] = (p[j] * t_sum - t[j]) * inv_b;
                }
            }
        }
        total += row_loss;
    }
    Ok((total * inv_b, grad))
}

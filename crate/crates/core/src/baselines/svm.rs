//! Linear one-vs-rest SVM trained by stochastic subgradient descent on the
//! hinge objective `lambda/2 ||w||^2 + mean(max(0, 1 - y (w.x + b)))` with
//! step size `1/(lambda (t0 + t))`. The bias is unregularized.
//!
//! The schedule offset `t0 = ceil(1/lambda)` keeps the first steps at unit
//! scale; the raw `1/(lambda t)` schedule opens with a step of `1/lambda`
//! that the unregularized bias never recovers from at small lambda. The
//! returned hyperplane is the average of the final epoch's iterates, which
//! smooths the terminal oscillation of subgradient descent.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax_f64, check_matrix};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            lambda: 1e-4,
            epochs: 50,
        }
    }
}

/// One hyperplane per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub num_classes: usize,
    pub dim: usize,
    pub lambda: f64,
    pub seed: u64,
}

/// The binary hinge objective for one hyperplane; `y_pm` holds +/-1 labels.
pub fn binary_objective(w: &[f64], b: f64, x: &[Vec<f64>], y_pm: &[f64], lambda: f64) -> f64 {
    let norm_sq: f64 = w.iter().map(|v| v * v).sum();
    let hinge: f64 = x
        .iter()
        .zip(y_pm)
        .map(|(row, &y)| {
            let margin = y * (dot(w, row) + b);
            (1.0 - margin).max(0.0)
        })
        .sum::<f64>()
        / x.len() as f64;
    lambda / 2.0 * norm_sq + hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit `num_classes` one-vs-rest hyperplanes; each class trains from its own
/// derived seed so results are order-independent and reproducible.
pub fn svm_fit(
    x: &[Vec<f64>],
    y: &[usize],
    num_classes: usize,
    params: &SvmParams,
    seed: u64,
) -> Result<LinearSvmModel> {
    let dim = check_matrix(x, y, num_classes)?;
    if params.lambda <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "lambda must be > 0, got {}",
            params.lambda
        )));
    }
    if params.epochs == 0 {
        return Err(Error::InvalidInput("epochs must be >= 1".into()));
    }
    let n = x.len();
    let mut weights = Vec::with_capacity(num_classes);
    let mut biases = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let y_pm: Vec<f64> = y
            .iter()
            .map(|&l| if l == class { 1.0 } else { -1.0 })
            .collect();
        let mut rng = seeding::rng(seeding::indexed_seed(seed, class as u64));
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut w_avg = vec![0.0; dim];
        let mut b_avg = 0.0;
        let mut avg_count = 0u64;
        let mut order: Vec<usize> = (0..n).collect();
        let t0 = (1.0 / params.lambda).ceil() as u64;
        let mut t = 1u64;
        for epoch in 0..params.epochs {
            order.shuffle(&mut rng);
            let averaging = epoch + 1 == params.epochs;
            for &i in &order {
                let eta = 1.0 / (params.lambda * (t0 + t) as f64);
                let margin = y_pm[i] * (dot(&w, &x[i]) + b);
                let shrink = 1.0 - eta * params.lambda;
                if margin < 1.0 {
                    for (wj, &xj) in w.iter_mut().zip(&x[i]) {
                        *wj = shrink * *wj + eta * y_pm[i] * xj;
                    }
                    b += eta * y_pm[i];
                } else {
                    for wj in w.iter_mut() {
                        *wj *= shrink;
                    }
                }
                t += 1;
                if averaging {
                    for (acc, &wj) in w_avg.iter_mut().zip(&w) {
                        *acc += wj;
                    }
                    b_avg += b;
                    avg_count += 1;
                }
            }
        }
        for acc in &mut w_avg {
            *acc /= avg_count as f64;
        }
        weights.push(w_avg);
        biases.push(b_avg / avg_count as f64);
    }
    Ok(LinearSvmModel {
        weights,
        biases,
        num_classes,
        dim,
        lambda: params.lambda,
        seed,
    })
}

/// Per-class decision values `w.x + b`.
pub fn svm_decision_values(model: &LinearSvmModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.dim {
        return Err(Error::DimensionMismatch(format!(
            "row has {} dims, model expects {}",
            x.len(),
            model.dim
        )));
    }
    Ok(model
        .weights
        .iter()
        .zip(&model.biases)
        .map(|(w, &b)| dot(w, x) + b)
        .collect())
}

/// Argmax over per-class decision values; ties toward the lowest class.
pub fn svm_predict(model: &LinearSvmModel, x: &[Vec<f64>]) -> Result<Vec<usize>> {
    x.iter()
        .map(|row| Ok(argmax_f64(&svm_decision_values(model, row)?)))
        .collect()
}

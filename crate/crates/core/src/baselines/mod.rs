//! Classical comparison classifiers operating on feature vectors: a Random
//! Forest (Gini-impurity trees over bootstrap samples) and a linear
//! one-vs-rest SVM trained by stochastic subgradient descent on the hinge
//! objective.

mod random_forest;
mod svm;

pub use random_forest::{rf_fit, rf_predict, RandomForestModel, RfParams};
pub use svm::{binary_objective, svm_decision_values, svm_fit, svm_predict, LinearSvmModel, SvmParams};

use crate::error::{Error, Result};

pub(crate) fn check_matrix(x: &[Vec<f64>], y: &[usize], num_classes: usize) -> Result<usize> {
    let first = x
        .first()
        .ok_or_else(|| Error::EmptyInput("no training vectors".into()))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::EmptyInput("zero-dimensional features".into()));
    }
    for row in x {
        if row.len() != dim {
            return Err(Error::RaggedInput(format!(
                "row has {} dims, expected {dim}",
                row.len()
            )));
        }
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!(
            "{} feature rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(dim)
}

/// Argmax with ties toward the lowest index.
pub(crate) fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

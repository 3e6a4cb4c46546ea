//! Evaluation: confusion matrices (counts and row-normalized), accuracy and
//! support-weighted F1, hyperparameter grid search, and wall-clock timing
//! aggregation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ConvBlockSpec, LossKind, OptimizerKind};

/// K x K counts; rows are true classes in canonical family order, columns
/// are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    /// Row-major counts.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.k..(i + 1) * self.k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts as nested rows, the shape used in JSON reports.
    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.k).map(|i| self.row(i).to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Tally aligned true/predicted label sequences into a K x K matrix.
pub fn confusion(true_labels: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::LengthMismatch(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::LabelOutOfRange(format!(
                "label pair ({t}, {p}) out of range for k = {k}"
            )));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

/// Each row divided by its sum; all-zero rows stay zero.
pub fn normalize_rows(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    (0..cm.k)
        .map(|i| {
            let row = cm.row(i);
            let sum: u64 = row.iter().sum();
            if sum == 0 {
                vec![0.0; cm.k]
            } else {
                row.iter().map(|&c| c as f64 / sum as f64).collect()
            }
        })
        .collect()
}

/// Accuracy, per-class precision/recall/F1 (0 on zero denominators), and
/// support-weighted F1.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut per_class = Vec::with_capacity(cm.k);
    let mut trace = 0u64;
    let mut weighted = 0.0;
    for i in 0..cm.k {
        let tp = cm.counts[i * cm.k + i];
        trace += tp;
        let support: u64 = cm.row(i).iter().sum();
        let predicted: u64 = (0..cm.k).map(|r| cm.counts[r * cm.k + i]).sum();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if support == 0 {
            0.0
        } else {
            tp as f64 / support as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += support as f64 * f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        weighted_f1: weighted / total as f64,
        per_class,
    })
}

/// Hyperparameter lists for the Cartesian grid. A list left empty in the
/// config falls back to the pipeline's single configured value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub l: Vec<usize>,
    #[serde(default)]
    pub conv_bases: Vec<Vec<ConvBlockSpec>>,
    #[serde(default)]
    pub optimizer: Vec<OptimizerKind>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
    #[serde(default)]
    pub loss: Vec<LossKind>,
}

/// One cell of the grid, in field order (n, l, base, optimizer, rate, loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n: usize,
    pub l: usize,
    pub conv_base: Vec<ConvBlockSpec>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCellOutcome {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub train_seconds: f64,
    pub test_seconds_per_sample: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: GridCell,
    #[serde(flatten)]
    pub outcome: GridCellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the best cell: maximal accuracy, ties broken by
    /// the lexicographically first config serialization.
    pub best: usize,
}

impl GridSpec {
    /// Cells in deterministic nested order (n, l, base, optimizer, rate,
    /// loss).
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &l in &self.l {
                for base in &self.conv_bases {
                    for &optimizer in &self.optimizer {
                        for &learning_rate in &self.learning_rate {
                            for &loss in &self.loss {
                                out.push(GridCell {
                                    n,
                                    l,
                                    conv_base: base.clone(),
                                    optimizer,
                                    learning_rate,
                                    loss,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Evaluate every cell of the Cartesian grid through `runner` and rank the
/// outcomes. Expensive sub-results (trained HMMs keyed on N and seed) are
/// the runner's to cache; this function guarantees visit order.
pub fn grid_search<F>(grid: &GridSpec, mut runner: F) -> Result<GridResult>
where
    F: FnMut(&GridCell) -> Result<GridCellOutcome>,
{
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let outcome = runner(&cell)?;
        rows.push(GridRow {
            config: cell,
            outcome,
        });
    }
    let mut best = 0usize;
    for i in 1..rows.len() {
        let better = rows[i].outcome.accuracy > rows[best].outcome.accuracy
            || (rows[i].outcome.accuracy == rows[best].outcome.accuracy
                && serde_json::to_string(&rows[i].config)? < serde_json::to_string(&rows[best].config)?);
        if better {
            best = i;
        }
    }
    Ok(GridResult { rows, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Wall-clock seconds per named training stage.
    pub stages: BTreeMap<String, f64>,
    pub total_train_seconds: f64,
    /// Absent when there were no test samples.
    pub test_seconds_per_sample: Option<f64>,
}

/// Aggregate per-stage training clocks plus an optional
/// `(test_seconds, test_sample_count)` measurement.
pub fn timing_report(stages: &[(&str, f64)], test: Option<(f64, usize)>) -> TimingReport {
    let mut map = BTreeMap::new();
    let mut total = 0.0;
    for (name, seconds) in stages {
        *map.entry(name.to_string()).or_insert(0.0) += seconds;
        total += seconds;
    }
    let test_seconds_per_sample = match test {
        Some((seconds, count)) if count > 0 => Some(seconds / count as f64),
        _ => None,
    };
    TimingReport {
        stages: map,
        total_train_seconds: total,
        test_seconds_per_sample,
    }
}

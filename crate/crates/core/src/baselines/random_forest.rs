//! Random Forest: bagged Gini-impurity decision trees with per-split
//! feature subsampling.
//!
//! Each tree trains on a bootstrap sample (with replacement, same size) of
//! the data. At every node, `mtry` features are sampled without replacement
//! and the split minimizing the weighted child Gini impurity is chosen, with
//! thresholds at midpoints between adjacent distinct sorted values. Nodes
//! stop on purity, the depth limit, fewer than two samples, or when no split
//! improves on the parent impurity. Every tie breaks deterministically
//! (lowest feature index, then lowest threshold; prediction ties toward the
//! lowest class index).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_f64, check_matrix};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> usize {
        let mut node = 0usize;
        loop {
            match &self.nodes[node] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { *left } else { *right };
                }
                TreeNode::Leaf { counts } => {
                    let as_f64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
                    return argmax_f64(&as_f64);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfParams {
    pub n_trees: usize,
    /// `None` grows trees to purity.
    pub max_depth: Option<usize>,
    /// Features sampled per split; `None` means `ceil(sqrt(dim))`.
    pub mtry: Option<usize>,
}

impl Default for RfParams {
    fn default() -> Self {
        RfParams {
            n_trees: 100,
            max_depth: None,
            mtry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub trees: Vec<Tree>,
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub mtry: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub seed: u64,
}

fn gini(counts: &[u64], total: f64) -> f64 {
    let mut acc = 1.0;
    for &c in counts {
        let p = c as f64 / total;
        acc -= p * p;
    }
    acc
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    num_classes: usize,
    mtry: usize,
    max_depth: Option<usize>,
    rng: rand_chacha::ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn counts_of(&self, indices: &[usize]) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &i in indices {
            counts[self.y[i]] += 1;
        }
        counts
    }

    fn build(&mut self, indices: &mut Vec<usize>, depth: usize) -> usize {
        let counts = self.counts_of(indices);
        let total = indices.len() as f64;
        let parent_gini = gini(&counts, total);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_stop = self.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_stop || indices.len() < 2 {
            let id = self.nodes.len();
            self.nodes.push(TreeNode::Leaf { counts });
            return id;
        }

        // Sample mtry distinct candidate features (partial Fisher-Yates),
        // then evaluate them in ascending order for deterministic
        // tie-breaking.
        let dim = self.x[0].len();
        let mut features: Vec<usize> = (0..dim).collect();
        for i in 0..self.mtry.min(dim) {
            let j = self.rng.random_range(i..dim);
            features.swap(i, j);
        }
        features.truncate(self.mtry.min(dim));
        features.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None; // (weighted gini, feature, threshold)
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(indices.len());
        for &feature in &features {
            sorted.clear();
            sorted.extend(indices.iter().map(|&i| (self.x[i][feature], self.y[i])));
            sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0u64; self.num_classes];
            let mut right = counts.clone();
            for w in 0..sorted.len() - 1 {
                left[sorted[w].1] += 1;
                right[sorted[w].1] -= 1;
                let (v, v_next) = (sorted[w].0, sorted[w + 1].0);
                if v == v_next {
                    continue;
                }
                let threshold = v + (v_next - v) / 2.0;
                let nl = (w + 1) as f64;
                let nr = total - nl;
                let weighted = (nl * gini(&left, nl) + nr * gini(&right, nr)) / total;
                let better = match &best {
                    None => true,
                    Some((bw, bf, bt)) => {
                        weighted < *bw
                            || (weighted == *bw && (feature < *bf || (feature == *bf && threshold < *bt)))
                    }
                };
                if better {
                    best = Some((weighted, feature, threshold));
                }
            }
        }

        // Accept only a strict impurity decrease.
        let Some((weighted, feature, threshold)) = best else {
            let id = self.nodes.len();
            self.nodes.push(TreeNode::Leaf { counts });
            return id;
        };
        if weighted >= parent_gini - 1e-12 {
            let id = self.nodes.len();
            self.nodes.push(TreeNode::Leaf { counts });
            return id;
        }

        let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| self.x[i][feature] <= threshold);
        indices.clear();
        indices.shrink_to_fit();
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(&mut left_idx, depth + 1);
        let right = self.build(&mut right_idx, depth + 1);
        if let TreeNode::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }
}

/// Fit a forest of `params.n_trees` trees, each on its own bootstrap sample
/// with a per-tree derived seed.
pub fn rf_fit(
    x: &[Vec<f64>],
    y: &[usize],
    num_classes: usize,
    params: &RfParams,
    seed: u64,
) -> Result<RandomForestModel> {
    let dim = check_matrix(x, y, num_classes)?;
    if params.n_trees == 0 {
        return Err(Error::InvalidInput("n_trees must be >= 1".into()));
    }
    let mtry = params
        .mtry
        .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
        .clamp(1, dim);
    let n = x.len();
    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeding::rng(seeding::indexed_seed(seed, t as u64));
            let mut bootstrap: Vec<usize> =
                (0..n).map(|_| rng.random_range(0..n)).collect();
            bootstrap.sort_unstable();
            let mut builder = TreeBuilder {
                x,
                y,
                num_classes,
                mtry,
                max_depth: params.max_depth,
                rng,
                nodes: Vec::new(),
            };
            builder.build(&mut bootstrap, 0);
            Tree {
                nodes: builder.nodes,
            }
        })
        .collect();
    Ok(RandomForestModel {
        trees,
        n_trees: params.n_trees,
        max_depth: params.max_depth,
        mtry,
        num_classes,
        dim,
        seed,
    })
}

/// Majority vote over the trees' leaf-majority classes; ties toward the
/// lowest class index.
pub fn rf_predict(model: &RandomForestModel, x: &[Vec<f64>]) -> Result<Vec<usize>> {
    for row in x {
        if row.len() != model.dim {
            return Err(Error::DimensionMismatch(format!(
                "row has {} dims, model expects {}",
                row.len(),
                model.dim
            )));
        }
    }
    Ok(x.iter()
        .map(|row| {
            let mut votes = vec![0.0; model.num_classes];
            for tree in &model.trees {
                votes[tree.predict(row)] += 1.0;
            }
            argmax_f64(&votes)
        })
        .collect())
}

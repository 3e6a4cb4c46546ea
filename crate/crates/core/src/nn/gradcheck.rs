//! Central-finite-difference validation of the analytic gradients.

use rand::Rng;

use super::loss::{compute_loss, LossKind};
use super::tensor::Tensor;
use super::{forward, parameter_gradients, CnnModel};
use crate::error::Result;
use crate::seeding;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per parameter tensor, in canonical order.
    pub per_layer: Vec<(String, f64)>,
}

fn loss_only(model: &CnnModel, batch: &Tensor, targets: &Tensor, kind: LossKind) -> Result<f64> {
    let (probs, _) = forward(model, batch)?;
    Ok(compute_loss(kind, &probs, targets)?.0)
}

/// Compare analytic parameter gradients against central differences
/// `(loss(w + h) - loss(w - h)) / 2h` on up to `samples_per_layer` randomly
/// chosen coordinates of every parameter tensor.
///
/// The relative error denominator is floored at 1e-6 so coordinates whose
/// true gradient is essentially zero are compared absolutely instead of
/// amplifying floating-point noise.
pub fn gradient_check(
    model: &CnnModel,
    batch: &Tensor,
    targets: &Tensor,
    kind: LossKind,
    h: f64,
    samples_per_layer: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (probs, cache) = forward(model, batch)?;
    let (_, grad_logits) = compute_loss(kind, &probs, targets)?;
    let analytic = parameter_gradients(model, &cache, &grad_logits)?;

    let names = model.param_names();
    let mut scratch = model.clone();
    let mut rng = seeding::rng(seed);
    let mut per_layer = Vec::with_capacity(names.len());
    let mut max_rel = 0.0f64;

    for (layer, name) in names.iter().enumerate() {
        let len = analytic[layer].len();
        let mut indices: Vec<usize> = (0..len).collect();
        if len > samples_per_layer {
            // Partial Fisher-Yates: the first samples_per_layer entries are
            // a uniform sample without replacement.
            for i in 0..samples_per_layer {
                let j = rng.random_range(i..len);
                indices.swap(i, j);
            }
            indices.truncate(samples_per_layer);
        }
        let mut layer_worst = 0.0f64;
        for &idx in &indices {
            let original = scratch.params()[layer].data[idx];
            scratch.params_mut()[layer].data[idx] = original + h;
            let loss_plus = loss_only(&scratch, batch, targets, kind)?;
            scratch.params_mut()[layer].data[idx] = original - h;
            let loss_minus = loss_only(&scratch, batch, targets, kind)?;
            scratch.params_mut()[layer].data[idx] = original;

            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let a = analytic[layer].data[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            layer_worst = layer_worst.max(rel);
        }
        max_rel = max_rel.max(layer_worst);
        per_layer.push((name.clone(), layer_worst));
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        per_layer,
    })
}

/// [`gradient_check`] with h = 1e-5 and 200 sampled weights per layer.
pub fn gradient_check_default(
    model: &CnnModel,
    batch: &Tensor,
    targets: &Tensor,
    kind: LossKind,
) -> Result<GradCheckReport> {
    gradient_check(model, batch, targets, kind, 1e-5, 200, model.seed ^ 0x6772_6164)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_cnn, CnnSpec, ConvBlockSpec};
    use rand::Rng;

    fn toy_setup(classes: usize, seed: u64) -> (CnnModel, Tensor, Tensor) {
        let spec = CnnSpec {
            input_side: 10,
            conv_blocks: vec![
                ConvBlockSpec {
                    filters: 3,
                    kernel: 3,
                    stride: 1,
                    pool: 2,
                },
                ConvBlockSpec {
                    filters: 5,
                    kernel: 2,
                    stride: 1,
                    pool: 1,
                },
            ],
            num_classes: classes,
        };
        let model = init_cnn(&spec, seed).unwrap();
        let mut rng = seeding::rng(seed + 7);
        let batch = Tensor::from_vec(
            &[2, 1, 10, 10],
            (0..200).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut targets = Tensor::zeros(&[2, classes]);
        targets.data[1] = 1.0;
        targets.data[classes + 2] = 1.0;
        (model, batch, targets)
    }

    #[test]
    fn all_layers_pass_for_every_loss() {
        let (model, batch, targets) = toy_setup(4, 13);
        for kind in [
            LossKind::CategoricalCrossentropy,
            LossKind::KullbackLeiblerDivergence,
            LossKind::Poisson,
        ] {
            let report = gradient_check(&model, &batch, &targets, kind, 1e-5, 60, 5).unwrap();
            assert!(
                report.max_relative_error < 1e-4,
                "{kind:?}: {:?}",
                report.per_layer
            );
        }
    }

    #[test]
    fn strided_conv_and_unit_pool_pass_gradient_check() {
        let spec = CnnSpec {
            input_side: 12,
            conv_blocks: vec![
                ConvBlockSpec {
                    filters: 4,
                    kernel: 3,
                    stride: 2,
                    pool: 1,
                },
                ConvBlockSpec {
                    filters: 6,
                    kernel: 2,
                    stride: 1,
                    pool: 2,
                },
            ],
            num_classes: 3,
        };
        let model = init_cnn(&spec, 88).unwrap();
        let mut rng = seeding::rng(89);
        let batch = Tensor::from_vec(
            &[2, 1, 12, 12],
            (0..288).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut targets = Tensor::zeros(&[2, 3]);
        targets.data[0] = 1.0;
        targets.data[3 + 2] = 1.0;
        let report = gradient_check(
            &model,
            &batch,
            &targets,
            LossKind::CategoricalCrossentropy,
            1e-5,
            80,
            90,
        )
        .unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "stride-2 path: {:?}",
            report.per_layer
        );
    }

    #[test]
    fn error_estimate_is_stable_under_h_doubling() {
        let (model, batch, targets) = toy_setup(3, 29);
        let r1 = gradient_check(
            &model,
            &batch,
            &targets,
            LossKind::CategoricalCrossentropy,
            1e-5,
            40,
            5,
        )
        .unwrap();
        let r2 = gradient_check(
            &model,
            &batch,
            &targets,
            LossKind::CategoricalCrossentropy,
            2e-5,
            40,
            5,
        )
        .unwrap();
        // Central differences have O(h^2) truncation error; doubling h must
        // not change the estimate by orders of magnitude.
        assert!(r1.max_relative_error < 1e-4);
        assert!(r2.max_relative_error < 1e-4);
        assert!(r2.max_relative_error < r1.max_relative_error.max(1e-9) * 100.0);
    }
}

//! A small CNN stack with explicit forward and backward passes: valid 2-D
//! cross-correlation blocks (conv + ReLU + non-overlapping max pool)
//! followed by the fixed classification head GAP -> dense(1024, ReLU) ->
//! dense(num_classes, softmax).
//!
//! No autodiff: every gradient is hand-derived and checked against central
//! finite differences (see [`gradcheck`]). Training is seed-deterministic;
//! batch members are processed in parallel but reduced in index order, so
//! results are bitwise reproducible.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_default, GradCheckReport};
pub use loss::{compute_loss, LossKind, PROB_FLOOR};
pub use optim::{update_params, OptState, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::ImageMatrix;
use crate::seeding;

/// Width of the fixed bottleneck dense layer in the classification head.
pub const HEAD_DENSE_UNITS: usize = 1024;

/// One convolutional block: conv (valid, cross-correlation) + ReLU +
/// non-overlapping max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

/// Default desk-scale base: three 3x3 blocks with 8, 16, 32 filters.
pub fn default_conv_blocks() -> Vec<ConvBlockSpec> {
    [8, 16, 32]
        .iter()
        .map(|&filters| ConvBlockSpec {
            filters,
            kernel: 3,
            stride: 1,
            pool: 2,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub input_side: usize,
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub num_classes: usize,
}

/// Spatial bookkeeping for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub in_ch: usize,
    pub in_side: usize,
    pub conv_side: usize,
    pub pool_side: usize,
}

impl CnnSpec {
    /// Walk the spatial dimensions through every block, rejecting any
    /// configuration where a dimension would drop below 1.
    pub fn block_dims(&self) -> Result<Vec<BlockDims>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidDimension("num_classes must be >= 1".into()));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidDimension(
                "at least one conv block is required".into(),
            ));
        }
        let mut dims = Vec::with_capacity(self.conv_blocks.len());
        let mut side = self.input_side;
        let mut channels = 1usize;
        for (i, block) in self.conv_blocks.iter().enumerate() {
            if block.filters == 0 || block.kernel == 0 || block.stride == 0 || block.pool == 0 {
                return Err(Error::InvalidDimension(format!(
                    "block {i} has a zero field: {block:?}"
                )));
            }
            if side < block.kernel {
                return Err(Error::InvalidDimension(format!(
                    "block {i}: input side {side} smaller than kernel {}",
                    block.kernel
                )));
            }
            let conv_side = layers::conv_out_side(side, block.kernel, block.stride);
            let pool_side = conv_side / block.pool;
            if conv_side == 0 || pool_side == 0 {
                return Err(Error::InvalidDimension(format!(
                    "block {i}: spatial dimension vanished (conv {conv_side}, pool {pool_side})"
                )));
            }
            dims.push(BlockDims {
                in_ch: channels,
                in_side: side,
                conv_side,
                pool_side,
            });
            channels = block.filters;
            side = pool_side;
        }
        Ok(dims)
    }

    /// Channel count entering the GAP layer.
    pub fn gap_channels(&self) -> usize {
        self.conv_blocks.last().map_or(1, |b| b.filters)
    }
}

/// CNN weights in canonical parameter order: per block conv weight
/// `[filters, in_ch, k, k]` then bias `[filters]`, then the head's
/// dense1 `[1024, gap_ch]` + bias and dense2 `[num_classes, 1024]` + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub spec: CnnSpec,
    pub conv_weights: Vec<Tensor>,
    pub conv_bias: Vec<Tensor>,
    pub dense1_w: Tensor,
    pub dense1_b: Tensor,
    pub dense2_w: Tensor,
    pub dense2_b: Tensor,
    pub seed: u64,
}

impl CnnModel {
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_bias) {
            out.push(w);
            out.push(b);
        }
        out.extend([&self.dense1_w, &self.dense1_b, &self.dense2_w, &self.dense2_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.conv_weights.iter_mut().zip(self.conv_bias.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &mut self.dense1_w,
            &mut self.dense1_b,
            &mut self.dense2_w,
            &mut self.dense2_b,
        ]);
        out
    }

    /// Human-readable parameter-tensor names matching [`Self::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.conv_weights.len() {
            out.push(format!("conv{i}.weight"));
            out.push(format!("conv{i}.bias"));
        }
        out.extend(
            ["dense1.weight", "dense1.bias", "dense2.weight", "dense2.bias"]
                .map(String::from),
        );
        out
    }

    fn fingerprint(&self) -> u64 {
        let mut h = seeding::stable_hash64(&format!(
            "{}x{}x{}",
            self.spec.input_side,
            self.spec.num_classes,
            self.spec.conv_blocks.len()
        ));
        for p in self.params() {
            h = h
                .rotate_left(7)
                .wrapping_add(seeding::mix64(p.len() as u64));
        }
        h
    }
}

/// Fan-in-scaled uniform initialization from the model seed; biases start
/// at zero.
pub fn init_cnn(spec: &CnnSpec, seed: u64) -> Result<CnnModel> {
    let dims = spec.block_dims()?;
    let mut rng = seeding::rng(seed);
    let mut conv_weights = Vec::new();
    let mut conv_bias = Vec::new();
    for (block, d) in spec.conv_blocks.iter().zip(&dims) {
        let fan_in = (d.in_ch * block.kernel * block.kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let len = block.filters * d.in_ch * block.kernel * block.kernel;
        let data: Vec<f64> = (0..len)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
            .collect();
        conv_weights.push(Tensor::from_vec(
            &[block.filters, d.in_ch, block.kernel, block.kernel],
            data,
        )?);
        conv_bias.push(Tensor::zeros(&[block.filters]));
    }
    let gap_ch = spec.gap_channels();
    let limit1 = (6.0 / gap_ch as f64).sqrt();
    let dense1_w = Tensor::from_vec(
        &[HEAD_DENSE_UNITS, gap_ch],
        (0..HEAD_DENSE_UNITS * gap_ch)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit1)
            .collect(),
    )?;
    let limit2 = (6.0 / HEAD_DENSE_UNITS as f64).sqrt();
    let dense2_w = Tensor::from_vec(
        &[spec.num_classes, HEAD_DENSE_UNITS],
        (0..spec.num_classes * HEAD_DENSE_UNITS)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit2)
            .collect(),
    )?;
    Ok(CnnModel {
        spec: spec.clone(),
        conv_weights,
        conv_bias,
        dense1_w,
        dense1_b: Tensor::zeros(&[HEAD_DENSE_UNITS]),
        dense2_w,
        dense2_b: Tensor::zeros(&[spec.num_classes]),
        seed,
    })
}

/// Everything the backward pass needs for one sample.
struct SampleTrace {
    block_in: Vec<Vec<f64>>,
    conv_z: Vec<Vec<f64>>,
    pool_idx: Vec<Vec<u32>>,
    gap_out: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    probs: Vec<f64>,
}

/// Opaque forward cache consumed by [`backward_and_step`].
pub struct ForwardCache {
    traces: Vec<SampleTrace>,
    fingerprint: u64,
}

fn forward_sample(model: &CnnModel, image: &[f64], dims: &[BlockDims]) -> SampleTrace {
    let spec = &model.spec;
    let mut block_in = Vec::with_capacity(dims.len());
    let mut conv_z = Vec::with_capacity(dims.len());
    let mut pool_idx = Vec::with_capacity(dims.len());
    let mut cur = image.to_vec();
    for (k, (block, d)) in spec.conv_blocks.iter().zip(dims).enumerate() {
        let mut z = vec![0.0; block.filters * d.conv_side * d.conv_side];
        layers::conv2d_forward(
            &cur,
            d.in_ch,
            d.in_side,
            &model.conv_weights[k].data,
            &model.conv_bias[k].data,
            block.filters,
            block.kernel,
            block.stride,
            &mut z,
        );
        let mut a = vec![0.0; z.len()];
        layers::relu_forward(&z, &mut a);
        let mut pooled = vec![0.0; block.filters * d.pool_side * d.pool_side];
        let mut idx = vec![0u32; pooled.len()];
        layers::maxpool_forward(&a, block.filters, d.conv_side, block.pool, &mut pooled, &mut idx);
        block_in.push(std::mem::replace(&mut cur, pooled));
        conv_z.push(z);
        pool_idx.push(idx);
    }
    let gap_ch = spec.gap_channels();
    let last = dims.last().unwrap();
    let mut gap_out = vec![0.0; gap_ch];
    layers::gap_forward(&cur, gap_ch, last.pool_side, &mut gap_out);
    let mut z1 = vec![0.0; HEAD_DENSE_UNITS];
    layers::dense_forward(&gap_out, &model.dense1_w.data, &model.dense1_b.data, &mut z1);
    let mut a1 = vec![0.0; HEAD_DENSE_UNITS];
    layers::relu_forward(&z1, &mut a1);
    let mut logits = vec![0.0; spec.num_classes];
    layers::dense_forward(&a1, &model.dense2_w.data, &model.dense2_b.data, &mut logits);
    let mut probs = vec![0.0; spec.num_classes];
    layers::softmax_row(&logits, &mut probs);
    SampleTrace {
        block_in,
        conv_z,
        pool_idx,
        gap_out,
        z1,
        a1,
        probs,
    }
}

/// Run the network over a `[B, 1, side, side]` batch; returns `[B, classes]`
/// softmax probabilities plus the cache for the backward pass.
pub fn forward(model: &CnnModel, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let side = model.spec.input_side;
    if batch.shape.len() != 4 || batch.shape[1] != 1 || batch.shape[2] != side || batch.shape[3] != side
    {
        return Err(Error::ShapeMismatch(format!(
            "expected batch shape [B, 1, {side}, {side}], got {:?}",
            batch.shape
        )));
    }
    let b = batch.shape[0];
    if b == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let dims = model.spec.block_dims()?;
    let plane = side * side;
    let traces: Vec<SampleTrace> = (0..b)
        .into_par_iter()
        .map(|i| forward_sample(model, &batch.data[i * plane..(i + 1) * plane], &dims))
        .collect();
    let mut probs = Tensor::zeros(&[b, model.spec.num_classes]);
    for (i, trace) in traces.iter().enumerate() {
        probs.data[i * model.spec.num_classes..(i + 1) * model.spec.num_classes]
            .copy_from_slice(&trace.probs);
    }
    Ok((
        probs,
        ForwardCache {
            traces,
            fingerprint: model.fingerprint(),
        },
    ))
}

fn backward_sample(
    model: &CnnModel,
    dims: &[BlockDims],
    trace: &SampleTrace,
    grad_logits: &[f64],
    grads: &mut [Tensor],
) {
    let spec = &model.spec;
    let n_blocks = spec.conv_blocks.len();
    // Head: dense2 <- relu <- dense1 <- gap.
    let mut grad_a1 = vec![0.0; HEAD_DENSE_UNITS];
    {
        let (d2w, rest) = grads[2 * n_blocks + 2..].split_at_mut(1);
        layers::dense_backward(
            &trace.a1,
            &model.dense2_w.data,
            grad_logits,
            &mut d2w[0].data,
            &mut rest[0].data,
            &mut grad_a1,
        );
    }
    let mut grad_z1 = vec![0.0; HEAD_DENSE_UNITS];
    layers::relu_backward(&trace.z1, &grad_a1, &mut grad_z1);
    let mut grad_gap = vec![0.0; trace.gap_out.len()];
    {
        let (d1w, rest) = grads[2 * n_blocks..].split_at_mut(1);
        layers::dense_backward(
            &trace.gap_out,
            &model.dense1_w.data,
            &grad_z1,
            &mut d1w[0].data,
            &mut rest[0].data,
            &mut grad_gap,
        );
    }
    let last = dims.last().unwrap();
    let gap_ch = spec.gap_channels();
    let mut grad_pooled = vec![0.0; gap_ch * last.pool_side * last.pool_side];
    layers::gap_backward(&grad_gap, gap_ch, last.pool_side, &mut grad_pooled);

    // Blocks in reverse: pool <- relu <- conv.
    for k in (0..n_blocks).rev() {
        let block = &spec.conv_blocks[k];
        let d = &dims[k];
        let conv_len = block.filters * d.conv_side * d.conv_side;
        let mut grad_a = vec![0.0; conv_len];
        layers::maxpool_backward(&trace.pool_idx[k], &grad_pooled, &mut grad_a);
        let mut grad_z = vec![0.0; conv_len];
        layers::relu_backward(&trace.conv_z[k], &grad_a, &mut grad_z);
        let mut grad_input = vec![0.0; d.in_ch * d.in_side * d.in_side];
        let (gw, gb) = {
            let (left, right) = grads.split_at_mut(2 * k + 1);
            (&mut left[2 * k], &mut right[0])
        };
        layers::conv2d_backward(
            &trace.block_in[k],
            d.in_ch,
            d.in_side,
            &model.conv_weights[k].data,
            block.filters,
            block.kernel,
            block.stride,
            &grad_z,
            &mut gw.data,
            &mut gb.data,
            &mut grad_input,
        );
        grad_pooled = grad_input;
    }
}

/// Loss-gradient backpropagation through the cached forward pass, returning
/// parameter gradients in canonical order (summed over the batch).
pub fn parameter_gradients(
    model: &CnnModel,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<Vec<Tensor>> {
    if cache.fingerprint != model.fingerprint() {
        return Err(Error::StaleCache(
            "forward cache does not match this model".into(),
        ));
    }
    let classes = model.spec.num_classes;
    if grad_logits.shape != vec![cache.traces.len(), classes] {
        return Err(Error::StaleCache(format!(
            "gradient shape {:?} does not match cached batch of {} x {classes}",
            grad_logits.shape,
            cache.traces.len()
        )));
    }
    let dims = model.spec.block_dims()?;
    let zero_grads = || -> Vec<Tensor> {
        model
            .params()
            .iter()
            .map(|p| Tensor::zeros(&p.shape))
            .collect()
    };
    let per_sample: Vec<Vec<Tensor>> = cache
        .traces
        .par_iter()
        .enumerate()
        .map(|(i, trace)| {
            let mut grads = zero_grads();
            backward_sample(
                model,
                &dims,
                trace,
                grad_logits.row(i),
                &mut grads,
            );
            grads
        })
        .collect();
    // Fixed-order reduction keeps results bitwise deterministic.
    let mut total = zero_grads();
    for grads in per_sample {
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, v) in acc.data.iter_mut().zip(g.data) {
                *a += v;
            }
        }
    }
    Ok(total)
}

/// Backpropagate the loss gradient and apply one optimizer update in place.
pub fn backward_and_step(
    model: &mut CnnModel,
    cache: &ForwardCache,
    grad_logits: &Tensor,
    opt: &OptimizerConfig,
    state: &mut OptState,
) -> Result<()> {
    let grads = parameter_gradients(model, cache, grad_logits)?;
    let mut params = model.params_mut();
    update_params(opt, state, &mut params, &grads)
}

/// Fresh optimizer state sized for a model's parameters.
pub fn opt_state_for(model: &CnnModel) -> OptState {
    let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    OptState::for_params(&lens)
}

/// Per-epoch mean training loss and accuracy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

fn batch_from_images(images: &[ImageMatrix], indices: &[usize], side: usize) -> Tensor {
    let plane = side * side;
    let mut data = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        data.extend_from_slice(&images[i].pixels);
    }
    Tensor {
        shape: vec![indices.len(), 1, side, side],
        data,
    }
}

fn one_hot_targets(labels: &[usize], indices: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[indices.len(), classes]);
    for (r, &i) in indices.iter().enumerate() {
        t.data[r * classes + labels[i]] = 1.0;
    }
    t
}

fn check_images(model: &CnnModel, images: &[ImageMatrix]) -> Result<()> {
    let side = model.spec.input_side;
    if let Some(bad) = images.iter().find(|img| img.side != side) {
        return Err(Error::ShapeMismatch(format!(
            "image side {} does not match model input side {side}",
            bad.side
        )));
    }
    Ok(())
}

/// Train with seed-deterministic per-epoch shuffling. Labels are class
/// indices below `spec.num_classes`.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut CnnModel,
    images: &[ImageMatrix],
    labels: &[usize],
    opt: &OptimizerConfig,
    kind: LossKind,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<FitHistory> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no training images".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be >= 1".into()));
    }
    let classes = model.spec.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    check_images(model, images)?;

    let mut state = opt_state_for(model);
    let mut rng = seeding::rng(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = FitHistory::default();
    for _epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch = batch_from_images(images, chunk, model.spec.input_side);
            let targets = one_hot_targets(labels, chunk, classes);
            let (probs, cache) = forward(model, &batch)?;
            let (loss, grad) = compute_loss(kind, &probs, &targets)?;
            loss_sum += loss * chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                if argmax(probs.row(r)) == labels[i] {
                    correct += 1;
                }
            }
            backward_and_step(model, &cache, &grad, opt, &mut state)?;
        }
        history.loss.push(loss_sum / images.len() as f64);
        history
            .accuracy
            .push(correct as f64 / images.len() as f64);
    }
    Ok(history)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class indices (argmax of softmax, ties toward the lowest
/// index). Processes images in fixed-size chunks.
pub fn predict(model: &CnnModel, images: &[ImageMatrix]) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    check_images(model, images)?;
    let mut out = Vec::with_capacity(images.len());
    let indices: Vec<usize> = (0..images.len()).collect();
    for chunk in indices.chunks(64) {
        let batch = batch_from_images(images, chunk, model.spec.input_side);
        let (probs, _) = forward(model, &batch)?;
        for r in 0..chunk.len() {
            out.push(argmax(probs.row(r)));
        }
    }
    Ok(out)
}

/// 1-D discrete convolution `c_k = sum_i x_i * y_{k-i}` over all overlapping
/// positions; output length `|x| + |y| - 1`.
pub fn convolve1d(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("convolve1d needs non-empty inputs".into()));
    }
    let out_len = x.len() + y.len() - 1;
    let mut c = vec![0.0; out_len];
    for k in 0..out_len {
        let i_lo = (k + 1).saturating_sub(y.len());
        let i_hi = k.min(x.len() - 1);
        let mut acc = 0.0;
        for i in i_lo..=i_hi {
            acc += x[i] * y[k - i];
        }
        c[k] = acc;
    }
    Ok(c)
}

#[derive(Debug, Serialize, Deserialize)]
struct CnnSpecFile {
    input_side: usize,
    conv_blocks: Vec<ConvBlockSpec>,
    num_classes: usize,
    seed: u64,
}

/// Persist the spec as JSON and the weights as a little-endian f32 blob in
/// canonical parameter order.
pub fn save_cnn(model: &CnnModel, spec_path: &Path, weights_path: &Path) -> Result<()> {
    let file = CnnSpecFile {
        input_side: model.spec.input_side,
        conv_blocks: model.spec.conv_blocks.clone(),
        num_classes: model.spec.num_classes,
        seed: model.seed,
    };
    std::fs::write(spec_path, serde_json::to_string_pretty(&file)?)?;
    let mut blob: Vec<u8> = Vec::new();
    for p in model.params() {
        for &v in &p.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(weights_path, blob)?;
    Ok(())
}

pub fn load_cnn(spec_path: &Path, weights_path: &Path) -> Result<CnnModel> {
    let file: CnnSpecFile = serde_json::from_str(&std::fs::read_to_string(spec_path)?)?;
    let spec = CnnSpec {
        input_side: file.input_side,
        conv_blocks: file.conv_blocks,
        num_classes: file.num_classes,
    };
    let mut model = init_cnn(&spec, file.seed)?;
    let blob = std::fs::read(weights_path)?;
    let expected: usize = model.params().iter().map(|p| p.len()).sum();
    if blob.len() != expected * 4 {
        return Err(Error::LengthMismatch(format!(
            "weight blob holds {} bytes, expected {}",
            blob.len(),
            expected * 4
        )));
    }
    let mut offset = 0;
    for p in model.params_mut() {
        for v in &mut p.data {
            *v = f64::from(f32::from_le_bytes(
                blob[offset..offset + 4].try_into().unwrap(),
            ));
            offset += 4;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{embed_image, FeatureVector};

    fn toy_spec(input_side: usize, classes: usize) -> CnnSpec {
        CnnSpec {
            input_side,
            conv_blocks: vec![
                ConvBlockSpec {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                    pool: 2,
                },
                ConvBlockSpec {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    pool: 2,
                },
            ],
            num_classes: classes,
        }
    }

    fn image_from(values: Vec<f64>, side: usize) -> ImageMatrix {
        embed_image(
            &FeatureVector {
                values,
                sample_id: "s".into(),
                label: "l".into(),
            },
            side,
        )
        .unwrap()
    }

    #[test]
    fn convolve1d_direct_expansion() {
        assert_eq!(
            convolve1d(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            vec![3.0, 10.0, 8.0]
        );
    }

    #[test]
    fn convolve1d_identity_kernel() {
        let x = [5.0, -1.0, 2.5, 0.0, 7.0];
        assert_eq!(convolve1d(&x, &[1.0]).unwrap(), x.to_vec());
    }

    #[test]
    fn convolve1d_matches_naive_oracle() {
        use rand::Rng;
        let mut rng = crate::seeding::rng(17);
        for _ in 0..100 {
            let nx = rng.random_range(1..=8);
            let ny = rng.random_range(1..=8);
            let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..ny).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = convolve1d(&x, &y).unwrap();
            // Independent naive double loop.
            let mut expect = vec![0.0; nx + ny - 1];
            for (i, &xi) in x.iter().enumerate() {
                for (j, &yj) in y.iter().enumerate() {
                    expect[i + j] += xi * yj;
                }
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn convolve1d_rejects_empty() {
        assert!(matches!(
            convolve1d(&[], &[1.0]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            convolve1d(&[1.0], &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn spec_validation_tracks_spatial_dims() {
        let spec = toy_spec(16, 3);
        let dims = spec.block_dims().unwrap();
        assert_eq!(dims[0].conv_side, 14);
        assert_eq!(dims[0].pool_side, 7);
        assert_eq!(dims[1].conv_side, 5);
        assert_eq!(dims[1].pool_side, 2);

        let too_small = toy_spec(5, 3);
        assert!(matches!(
            too_small.block_dims(),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn forward_softmax_rows_sum_to_one() {
        let spec = toy_spec(12, 5);
        let model = init_cnn(&spec, 3).unwrap();
        use rand::Rng;
        let mut rng = crate::seeding::rng(9);
        let data: Vec<f64> = (0..3 * 144).map(|_| rng.random_range(-2.0..2.0)).collect();
        let batch = Tensor::from_vec(&[3, 1, 12, 12], data).unwrap();
        let (probs, _) = forward(&model, &batch).unwrap();
        for r in 0..3 {
            let sum: f64 = probs.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let spec = toy_spec(12, 5);
        let model = init_cnn(&spec, 3).unwrap();
        let batch = Tensor::zeros(&[2, 1, 10, 10]);
        assert!(matches!(
            forward(&model, &batch),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let spec = toy_spec(12, 4);
        let a = init_cnn(&spec, 11).unwrap();
        let b = init_cnn(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = init_cnn(&spec, 12).unwrap();
        assert_ne!(a.conv_weights[0], c.conv_weights[0]);
        // Biases start at zero.
        assert!(a.conv_bias[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_tie_breaks_to_lowest_class() {
        let spec = toy_spec(12, 4);
        let mut model = init_cnn(&spec, 5).unwrap();
        // Zero the head: all logits equal -> argmax must be class 0.
        model.dense2_w.data.fill(0.0);
        model.dense2_b.data.fill(0.0);
        let image = image_from(vec![1.0; 100], 12);
        let pred = predict(&model, &[image]).unwrap();
        assert_eq!(pred, vec![0]);
    }

    #[test]
    fn predict_follows_forced_bias() {
        let spec = toy_spec(12, 5);
        let mut model = init_cnn(&spec, 5).unwrap();
        model.dense2_w.data.fill(0.0);
        model.dense2_b.data.fill(0.0);
        model.dense2_b.data[3] = 4.0;
        let image = image_from(vec![0.5; 64], 12);
        assert_eq!(predict(&model, &[image]).unwrap(), vec![3]);
    }

    #[test]
    fn zero_input_zero_bias_has_zero_conv_gradients() {
        let spec = toy_spec(12, 3);
        let model = init_cnn(&spec, 2).unwrap();
        let batch = Tensor::zeros(&[2, 1, 12, 12]);
        let targets = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let (probs, cache) = forward(&model, &batch).unwrap();
        let (_, grad) = compute_loss(LossKind::CategoricalCrossentropy, &probs, &targets).unwrap();
        let grads = parameter_gradients(&model, &cache, &grad).unwrap();
        // Conv weight gradients vanish on zero input (biases are zero so
        // every pre-activation is zero and ReLU kills the path too).
        assert!(grads[0].data.iter().all(|&g| g == 0.0));
        assert!(grads[2].data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = toy_spec(12, 3);
        let mut model = init_cnn(&spec, 2).unwrap();
        let batch = Tensor::zeros(&[1, 1, 12, 12]);
        let (_probs, cache) = forward(&model, &batch).unwrap();
        let other = init_cnn(&toy_spec(16, 3), 2).unwrap();
        let grad = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            parameter_gradients(&other, &cache, &grad),
            Err(Error::StaleCache(_))
        ));
        // Wrong gradient shape for a matching model.
        let bad_grad = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            parameter_gradients(&model, &cache, &bad_grad),
            Err(Error::StaleCache(_))
        ));
        let _ = &mut model;
    }

    #[test]
    fn fit_memorizes_small_set() {
        let spec = toy_spec(12, 2);
        let mut model = init_cnn(&spec, 21).unwrap();
        use rand::Rng;
        let mut rng = crate::seeding::rng(55);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let class = i % 2;
            // Distinct means per class plus noise.
            let base = if class == 0 { -1.0 } else { 1.5 };
            let values: Vec<f64> = (0..100)
                .map(|_| base + rng.random_range(-0.3..0.3))
                .collect();
            images.push(image_from(values, 12));
            labels.push(class);
        }
        let opt = OptimizerConfig::new(OptimizerKind::Nadam, 0.002).unwrap();
        let history = fit(
            &mut model,
            &images,
            &labels,
            &opt,
            LossKind::CategoricalCrossentropy,
            40,
            4,
            77,
        )
        .unwrap();
        assert_eq!(history.loss.len(), 40);
        assert_eq!(*history.accuracy.last().unwrap(), 1.0);
        // Training loss went down overall.
        assert!(history.loss.last().unwrap() < &history.loss[0]);
        // Predictions match the memorized labels.
        let preds = predict(&model, &images).unwrap();
        assert_eq!(preds, labels);
    }

    #[test]
    fn fit_is_seed_deterministic() {
        let spec = toy_spec(12, 2);
        let make = || {
            let mut model = init_cnn(&spec, 4).unwrap();
            let images: Vec<ImageMatrix> = (0..6)
                .map(|i| image_from(vec![i as f64 * 0.2 - 0.5; 80], 12))
                .collect();
            let labels = vec![0, 1, 0, 1, 0, 1];
            let opt = OptimizerConfig::new(OptimizerKind::Adam, 0.001).unwrap();
            let history = fit(
                &mut model,
                &images,
                &labels,
                &opt,
                LossKind::KullbackLeiblerDivergence,
                3,
                2,
                123,
            )
            .unwrap();
            (model, history)
        };
        let (m1, h1) = make();
        let (m2, h2) = make();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn fit_error_paths() {
        let spec = toy_spec(12, 2);
        let mut model = init_cnn(&spec, 4).unwrap();
        let opt = OptimizerConfig::new(OptimizerKind::Adam, 0.001).unwrap();
        assert!(matches!(
            fit(&mut model, &[], &[], &opt, LossKind::Poisson, 1, 2, 0),
            Err(Error::EmptyInput(_))
        ));
        let images = vec![image_from(vec![1.0; 10], 12)];
        assert!(matches!(
            fit(&mut model, &images, &[0, 1], &opt, LossKind::Poisson, 1, 2, 0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            fit(&mut model, &images, &[7], &opt, LossKind::Poisson, 1, 2, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cnn_save_load_roundtrip() {
        let spec = toy_spec(12, 3);
        let model = init_cnn(&spec, 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let spec_path = dir.path().join("cnn_spec.json");
        let weights_path = dir.path().join("cnn_weights.bin");
        save_cnn(&model, &spec_path, &weights_path).unwrap();
        let back = load_cnn(&spec_path, &weights_path).unwrap();
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.seed, model.seed);
        // Weights round-trip through f32.
        for (p, q) in model.params().iter().zip(back.params()) {
            for (a, b) in p.data.iter().zip(&q.data) {
                assert!((a - b).abs() <= (*a as f32).abs() as f64 * 1e-6 + 1e-9);
            }
        }
        // Blob size is the documented layout.
        let blob = std::fs::read(&weights_path).unwrap();
        let expected: usize = model.params().iter().map(|p| p.len()).sum();
        assert_eq!(blob.len(), expected * 4);
    }
}

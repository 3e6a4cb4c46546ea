//! Per-sample layer kernels: valid 2-D cross-correlation, ReLU,
//! non-overlapping max pooling, global average pooling, dense, softmax, and
//! their exact backward passes.
//!
//! All buffers are flat row-major slices; channel planes are `side * side`
//! contiguous blocks. These kernels dominate training time, so the inner
//! loops run over contiguous output rows.

/// Output side of a valid convolution.
pub fn conv_out_side(in_side: usize, kernel: usize, stride: usize) -> usize {
    (in_side - kernel) / stride + 1
}

/// z[oc, oy, ox] = bias[oc] + sum_{ic, ky, kx} w[oc, ic, ky, kx] *
/// input[ic, oy*s + ky, ox*s + kx]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    in_ch: usize,
    in_side: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    output: &mut [f64],
) {
    let out_side = conv_out_side(in_side, kernel, stride);
    let plane = out_side * out_side;
    let in_plane = in_side * in_side;
    let w_per_oc = in_ch * kernel * kernel;
    for oc in 0..out_ch {
        let out_plane = &mut output[oc * plane..(oc + 1) * plane];
        out_plane.fill(bias[oc]);
        for ic in 0..in_ch {
            let in_base = &input[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let w = weights[oc * w_per_oc + ic * kernel * kernel + ky * kernel + kx];
                    for oy in 0..out_side {
                        let in_row = &in_base[(oy * stride + ky) * in_side + kx..];
                        let out_row = &mut out_plane[oy * out_side..(oy + 1) * out_side];
                        if stride == 1 {
                            for (o, i) in out_row.iter_mut().zip(&in_row[..out_side]) {
                                *o += w * i;
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                *o += w * in_row[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    in_ch: usize,
    in_side: usize,
    weights: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    grad_out: &[f64],
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: &mut [f64],
) {
    let out_side = conv_out_side(in_side, kernel, stride);
    let plane = out_side * out_side;
    let in_plane = in_side * in_side;
    let w_per_oc = in_ch * kernel * kernel;
    grad_input.fill(0.0);
    for oc in 0..out_ch {
        let go_plane = &grad_out[oc * plane..(oc + 1) * plane];
        grad_bias[oc] += go_plane.iter().sum::<f64>();
        for ic in 0..in_ch {
            let in_base = &input[ic * in_plane..(ic + 1) * in_plane];
            let gi_base = &mut grad_input[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let w_idx = oc * w_per_oc + ic * kernel * kernel + ky * kernel + kx;
                    let w = weights[w_idx];
                    let mut gw = 0.0;
                    for oy in 0..out_side {
                        let go_row = &go_plane[oy * out_side..(oy + 1) * out_side];
                        let in_off = (oy * stride + ky) * in_side + kx;
                        if stride == 1 {
                            let in_row = &in_base[in_off..in_off + out_side];
                            let gi_row = &mut gi_base[in_off..in_off + out_side];
                            for ox in 0..out_side {
                                gw += go_row[ox] * in_row[ox];
                                gi_row[ox] += w * go_row[ox];
                            }
                        } else {
                            for (ox, &go) in go_row.iter().enumerate() {
                                gw += go * in_base[in_off + ox * stride];
                                gi_base[in_off + ox * stride] += w * go;
                            }
                        }
                    }
                    grad_weights[w_idx] += gw;
                }
            }
        }
    }
}

pub fn relu_forward(z: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(z) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// grad_z = grad_out masked by z > 0 (derivative at exactly 0 is taken as 0).
pub fn relu_backward(z: &[f64], grad_out: &[f64], grad_z: &mut [f64]) {
    for i in 0..z.len() {
        grad_z[i] = if z[i] > 0.0 { grad_out[i] } else { 0.0 };
    }
}

/// Non-overlapping max over `pool x pool` windows; trailing rows/columns
/// that do not fill a window are dropped. `argmax` records, per output
/// cell, the flat input index (within the whole multi-channel buffer) of
/// the selected element, with ties to the first (row-major lowest) index.
pub fn maxpool_forward(
    input: &[f64],
    channels: usize,
    in_side: usize,
    pool: usize,
    output: &mut [f64],
    argmax: &mut [u32],
) {
    let out_side = in_side / pool;
    let in_plane = in_side * in_side;
    let out_plane = out_side * out_side;
    for c in 0..channels {
        let in_base = c * in_plane;
        for py in 0..out_side {
            for px in 0..out_side {
                let mut best_idx = in_base + (py * pool) * in_side + px * pool;
                let mut best = input[best_idx];
                for wy in 0..pool {
                    for wx in 0..pool {
                        let idx = in_base + (py * pool + wy) * in_side + (px * pool + wx);
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                output[c * out_plane + py * out_side + px] = best;
                argmax[c * out_plane + py * out_side + px] = best_idx as u32;
            }
        }
    }
}

pub fn maxpool_backward(argmax: &[u32], grad_out: &[f64], grad_in: &mut [f64]) {
    grad_in.fill(0.0);
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_in[idx as usize] += g;
    }
}

/// Global average pooling: one mean per channel plane.
pub fn gap_forward(input: &[f64], channels: usize, side: usize, output: &mut [f64]) {
    let plane = side * side;
    for c in 0..channels {
        let sum: f64 = input[c * plane..(c + 1) * plane].iter().sum();
        output[c] = sum / plane as f64;
    }
}

pub fn gap_backward(grad_out: &[f64], channels: usize, side: usize, grad_in: &mut [f64]) {
    let plane = side * side;
    for c in 0..channels {
        let g = grad_out[c] / plane as f64;
        grad_in[c * plane..(c + 1) * plane].fill(g);
    }
}

/// z = W x + b with W stored [out, in] row-major.
pub fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64], z: &mut [f64]) {
    let in_dim = x.len();
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &weights[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o];
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        *zo = acc;
    }
}

pub fn dense_backward(
    x: &[f64],
    weights: &[f64],
    grad_z: &[f64],
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_x: &mut [f64],
) {
    let in_dim = x.len();
    grad_x.fill(0.0);
    for (o, &gz) in grad_z.iter().enumerate() {
        grad_bias[o] += gz;
        let w_row = &weights[o * in_dim..(o + 1) * in_dim];
        let gw_row = &mut grad_weights[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            gw_row[i] += gz * x[i];
            grad_x[i] += w_row[i] * gz;
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(logits: &[f64], probs: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
}

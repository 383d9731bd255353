//! Shape inference and forward evaluation for every primitive.

use super::{shape_err, PrimitiveKind, Target, Tensor, TensorError};
use crate::linalg::{matrix_exp, SmallMatrix};

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Valid output index range [lo, hi) along one conv axis: every o in the
/// range satisfies 0 <= o*stride + k_off - padding < in_len.
pub(crate) fn conv_span(
    out_len: usize,
    stride: usize,
    k_off: usize,
    padding: usize,
    in_len: usize,
) -> (usize, usize) {
    let shift = k_off as isize - padding as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let upper = in_len as isize - shift;
    if upper <= 0 {
        return (0, 0);
    }
    let hi = ((upper as usize - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn want(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<(), TensorError> {
    if inputs.len() != n {
        return Err(shape_err(
            op,
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn want_rank(op: &'static str, t: &Tensor, rank: usize, role: &str) -> Result<(), TensorError> {
    if t.shape().len() != rank {
        return Err(shape_err(
            op,
            format!("{role} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn infer_shape(
    op: &PrimitiveKind,
    inputs: &[&Tensor],
) -> Result<Vec<usize>, TensorError> {
    match op {
        PrimitiveKind::Leaf => unreachable!("leaf never reaches primitive_forward"),
        PrimitiveKind::Conv2d { stride, padding } => {
            want("conv2d", inputs, 2)?;
            want_rank("conv2d", inputs[0], 3, "input")?;
            want_rank("conv2d", inputs[1], 4, "kernel")?;
            if *stride == 0 {
                return Err(shape_err("conv2d", "stride must be at least 1".into()));
            }
            let (cin, h, w) = (
                inputs[0].shape()[0],
                inputs[0].shape()[1],
                inputs[0].shape()[2],
            );
            let ks = inputs[1].shape();
            let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
            if kcin != cin {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel expects {kcin} input channels, input has {cin}"),
                ));
            }
            if h + 2 * padding < kh || w + 2 * padding < kw {
                return Err(shape_err(
                    "conv2d",
                    format!(
                        "kernel {kh}x{kw} exceeds padded input {}x{}",
                        h + 2 * padding,
                        w + 2 * padding
                    ),
                ));
            }
            let oh = (h + 2 * padding - kh) / stride + 1;
            let ow = (w + 2 * padding - kw) / stride + 1;
            Ok(vec![cout, oh, ow])
        }
        PrimitiveKind::MatMul => {
            want("matmul", inputs, 2)?;
            want_rank("matmul", inputs[0], 2, "left operand")?;
            want_rank("matmul", inputs[1], 2, "right operand")?;
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let (k2, n) = (inputs[1].shape()[0], inputs[1].shape()[1]);
            if k != k2 {
                return Err(shape_err(
                    "matmul",
                    format!("inner dimensions differ: {k} vs {k2}"),
                ));
            }
            Ok(vec![m, n])
        }
        PrimitiveKind::Add | PrimitiveKind::Mul => {
            let name = op.name();
            want(name, inputs, 2)?;
            if inputs[0].shape() != inputs[1].shape() {
                return Err(shape_err(
                    name,
                    format!(
                        "operand shapes differ: {:?} vs {:?}",
                        inputs[0].shape(),
                        inputs[1].shape()
                    ),
                ));
            }
            Ok(inputs[0].shape().to_vec())
        }
        PrimitiveKind::ScalarMul { .. } => {
            want("scalar_mul", inputs, 1)?;
            Ok(inputs[0].shape().to_vec())
        }
        PrimitiveKind::BiasChannels => {
            want("bias_channels", inputs, 2)?;
            want_rank("bias_channels", inputs[0], 3, "input")?;
            want_rank("bias_channels", inputs[1], 1, "bias")?;
            let c = inputs[0].shape()[0];
            if inputs[1].shape()[0] != c {
                return Err(shape_err(
                    "bias_channels",
                    format!(
                        "bias has {} entries for {c} channels",
                        inputs[1].shape()[0]
                    ),
                ));
            }
            Ok(inputs[0].shape().to_vec())
        }
        PrimitiveKind::ConcatChannels => {
            if inputs.is_empty() {
                return Err(shape_err("concat_channels", "needs at least one input".into()));
            }
            let mut channels = 0;
            let (h, w) = (inputs[0].shape().get(1), inputs[0].shape().get(2));
            for (i, t) in inputs.iter().enumerate() {
                want_rank("concat_channels", t, 3, "every input")?;
                if t.shape().get(1) != h || t.shape().get(2) != w {
                    return Err(shape_err(
                        "concat_channels",
                        format!(
                            "input {i} has spatial shape {:?}, expected to match input 0 {:?}",
                            &t.shape()[1..],
                            &inputs[0].shape()[1..]
                        ),
                    ));
                }
                channels += t.shape()[0];
            }
            Ok(vec![channels, inputs[0].shape()[1], inputs[0].shape()[2]])
        }
        PrimitiveKind::SliceChannels { start, len } => {
            want("slice_channels", inputs, 1)?;
            want_rank("slice_channels", inputs[0], 3, "input")?;
            let c = inputs[0].shape()[0];
            if *len == 0 || start + len > c {
                return Err(shape_err(
                    "slice_channels",
                    format!("channels [{start}, {}) out of range for {c}", start + len),
                ));
            }
            Ok(vec![*len, inputs[0].shape()[1], inputs[0].shape()[2]])
        }
        PrimitiveKind::SoftmaxChannels => {
            want("softmax_channels", inputs, 1)?;
            want_rank("softmax_channels", inputs[0], 3, "input")?;
            Ok(inputs[0].shape().to_vec())
        }
        PrimitiveKind::Relu => {
            want("relu", inputs, 1)?;
            Ok(inputs[0].shape().to_vec())
        }
        PrimitiveKind::GlobalAvgPool => {
            want("global_avg_pool", inputs, 1)?;
            want_rank("global_avg_pool", inputs[0], 3, "input")?;
            Ok(vec![inputs[0].shape()[0]])
        }
        PrimitiveKind::UpsampleNearest { factor } => {
            want("upsample_nearest", inputs, 1)?;
            want_rank("upsample_nearest", inputs[0], 3, "input")?;
            if *factor == 0 {
                return Err(shape_err("upsample_nearest", "factor must be at least 1".into()));
            }
            let s = inputs[0].shape();
            Ok(vec![s[0], s[1] * factor, s[2] * factor])
        }
        PrimitiveKind::GroupNorm { groups, .. } => {
            want("group_norm", inputs, 3)?;
            want_rank("group_norm", inputs[0], 3, "input")?;
            want_rank("group_norm", inputs[1], 1, "gamma")?;
            want_rank("group_norm", inputs[2], 1, "beta")?;
            let c = inputs[0].shape()[0];
            if *groups == 0 || !c.is_multiple_of(*groups) {
                return Err(shape_err(
                    "group_norm",
                    format!("{c} channels not divisible into {groups} groups"),
                ));
            }
            if inputs[1].shape()[0] != c || inputs[2].shape()[0] != c {
                return Err(shape_err(
                    "group_norm",
                    format!(
                        "gamma/beta have {}/{} entries for {c} channels",
                        inputs[1].shape()[0],
                        inputs[2].shape()[0]
                    ),
                ));
            }
            Ok(inputs[0].shape().to_vec())
        }
        PrimitiveKind::Reshape { shape } => {
            want("reshape", inputs, 1)?;
            let want_len: usize = shape.iter().product();
            if want_len != inputs[0].len() {
                return Err(shape_err(
                    "reshape",
                    format!(
                        "target shape {shape:?} has {want_len} elements, input has {}",
                        inputs[0].len()
                    ),
                ));
            }
            Ok(shape.clone())
        }
        PrimitiveKind::TransposeAxes { perm } => {
            want("transpose_axes", inputs, 1)?;
            let rank = inputs[0].shape().len();
            let mut seen = vec![false; rank];
            let is_perm = perm.len() == rank
                && perm
                    .iter()
                    .all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
            if !is_perm {
                return Err(shape_err(
                    "transpose_axes",
                    format!("{perm:?} is not a permutation of 0..{rank}"),
                ));
            }
            Ok(perm.iter().map(|&p| inputs[0].shape()[p]).collect())
        }
        PrimitiveKind::Sum => {
            want("sum", inputs, 1)?;
            Ok(vec![1])
        }
        PrimitiveKind::SmoothedCrossEntropy { target, smoothing } => {
            want("smoothed_cross_entropy", inputs, 1)?;
            if !(0.0..1.0).contains(smoothing) {
                return Err(shape_err(
                    "smoothed_cross_entropy",
                    format!("smoothing {smoothing} outside [0, 1)"),
                ));
            }
            let s = inputs[0].shape();
            match target {
                Target::Class(c) => {
                    want_rank("smoothed_cross_entropy", inputs[0], 1, "logits")?;
                    if *c >= s[0] {
                        return Err(TensorError::TargetOutOfRange {
                            target: *c,
                            classes: s[0],
                        });
                    }
                }
                Target::Mask(mask) => {
                    want_rank("smoothed_cross_entropy", inputs[0], 3, "logits")?;
                    if mask.len() != s[1] * s[2] {
                        return Err(shape_err(
                            "smoothed_cross_entropy",
                            format!(
                                "mask has {} pixels, logits have {}x{}",
                                mask.len(),
                                s[1],
                                s[2]
                            ),
                        ));
                    }
                    if let Some(&bad) = mask.iter().find(|&&m| m >= s[0]) {
                        return Err(TensorError::TargetOutOfRange {
                            target: bad,
                            classes: s[0],
                        });
                    }
                }
            }
            Ok(vec![1])
        }
        PrimitiveKind::KernelExp { .. } => {
            want("kernel_exp", inputs, 1)?;
            want_rank("kernel_exp", inputs[0], 4, "kernel")?;
            let s = inputs[0].shape();
            if s[2] != s[3] {
                return Err(shape_err(
                    "kernel_exp",
                    format!("kernel slices must be square, got {}x{}", s[2], s[3]),
                ));
            }
            if s[2] == 0 {
                return Err(shape_err("kernel_exp", "kernel size must be at least 1".into()));
            }
            Ok(s.to_vec())
        }
    }
}

/// Computes output data plus per-op saved values for backward.
pub(crate) fn evaluate(
    op: &PrimitiveKind,
    inputs: &[&Tensor],
    out_shape: &[usize],
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let out_len: usize = out_shape.iter().product();
    match op {
        PrimitiveKind::Leaf => unreachable!("leaf never reaches primitive_forward"),
        PrimitiveKind::Conv2d { stride, padding } => {
            let x = inputs[0].data();
            let w = inputs[1].data();
            let (cin, h, win) = (
                inputs[0].shape()[0],
                inputs[0].shape()[1],
                inputs[0].shape()[2],
            );
            let (cout, kh, kw) = (out_shape[0], inputs[1].shape()[2], inputs[1].shape()[3]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut out = vec![0.0; out_len];
            for co in 0..cout {
                for ci in 0..cin {
                    let x_base = ci * h * win;
                    let w_base = (co * cin + ci) * kh * kw;
                    for ky in 0..kh {
                        let (oy0, oy1) = conv_span(oh, *stride, ky, *padding, h);
                        for kx in 0..kw {
                            let wv = w[w_base + ky * kw + kx];
                            let (ox0, ox1) = conv_span(ow, *stride, kx, *padding, win);
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - padding;
                                let o_row = co * oh * ow + oy * ow;
                                let x_row = x_base + iy * win;
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kx - padding;
                                    out[o_row + ox] += wv * x[x_row + ix];
                                }
                            }
                        }
                    }
                }
            }
            Ok((out, Vec::new()))
        }
        PrimitiveKind::MatMul => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            let mut out = vec![0.0; out_len];
            for i in 0..m {
                for l in 0..k {
                    let av = a[i * k + l];
                    let b_row = l * n;
                    let o_row = i * n;
                    for j in 0..n {
                        out[o_row + j] += av * b[b_row + j];
                    }
                }
            }
            Ok((out, Vec::new()))
        }
        PrimitiveKind::Add => {
            let out = inputs[0]
                .iter()
                .zip(inputs[1].iter())
                .map(|(a, b)| a + b)
                .collect();
            Ok((out, Vec::new()))
        }
        PrimitiveKind::Mul => {
            let out = inputs[0]
                .iter()
                .zip(inputs[1].iter())
                .map(|(a, b)| a * b)
                .collect();
            Ok((out, Vec::new()))
        }
        PrimitiveKind::ScalarMul { factor } => {
            Ok((inputs[0].iter().map(|x| x * factor).collect(), Vec::new()))
        }
        PrimitiveKind::BiasChannels => {
            let x = inputs[0].data();
            let b = inputs[1].data();
            let spatial = inputs[0].shape()[1] * inputs[0].shape()[2];
            let mut out = vec![0.0; out_len];
            for c in 0..inputs[0].shape()[0] {
                let bias = b[c];
                for p in 0..spatial {
                    out[c * spatial + p] = x[c * spatial + p] + bias;
                }
            }
            Ok((out, Vec::new()))
        }
        PrimitiveKind::ConcatChannels => {
            // Channel-major layout makes this plain buffer concatenation.
            let mut out = Vec::with_capacity(out_len);
            for t in inputs {
                out.extend_from_slice(t.data());
            }
            Ok((out, Vec::new()))
        }
        PrimitiveKind::SliceChannels { start, len } => {
            let spatial = inputs[0].shape()[1] * inputs[0].shape()[2];
            let lo = start * spatial;
            let hi = (start + len) * spatial;
            Ok((inputs[0].data()[lo..hi].to_vec(), Vec::new()))
        }
        PrimitiveKind::SoftmaxChannels => {
            let x = inputs[0].data();
            let (c, h, w) = (
                inputs[0].shape()[0],
                inputs[0].shape()[1],
                inputs[0].shape()[2],
            );
            let spatial = h * w;
            let mut out = vec![0.0; out_len];
            for p in 0..spatial {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(x[ch * spatial + p]);
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    let e = (x[ch * spatial + p] - max).exp();
                    out[ch * spatial + p] = e;
                    denom += e;
                }
                for ch in 0..c {
                    out[ch * spatial + p] /= denom;
                }
            }
            Ok((out, Vec::new()))
        }
        PrimitiveKind::Relu => {
            // Not `f64::max`, which would return 0 for NaN input; a non-finite
            // activation has to stay visible to the divergence checks.
            let y = inputs[0]
                .iter()
                .map(|&x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
                .collect();
            Ok((y, Vec::new()))
        }
        PrimitiveKind::GlobalAvgPool => {
            let x = inputs[0].data();
            let spatial = inputs[0].shape()[1] * inputs[0].shape()[2];
            let out = (0..out_len)
                .map(|c| x[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64)
                .collect();
            Ok((out, Vec::new()))
        }
        PrimitiveKind::UpsampleNearest { factor } => {
            let x = inputs[0].data();
            let (c, h, w) = (
                inputs[0].shape()[0],
                inputs[0].shape()[1],
                inputs[0].shape()[2],
            );
            let (oh, ow) = (h * factor, w * factor);
            let mut out = vec![0.0; out_len];
            for ch in 0..c {
                for oy in 0..oh {
                    let x_row = ch * h * w + (oy / factor) * w;
                    let o_row = ch * oh * ow + oy * ow;
                    for ox in 0..ow {
                        out[o_row + ox] = x[x_row + ox / factor];
                    }
                }
            }
            Ok((out, Vec::new()))
        }
        PrimitiveKind::GroupNorm { groups, eps } => {
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let beta = inputs[2].data();
            let (c, h, w) = (
                inputs[0].shape()[0],
                inputs[0].shape()[1],
                inputs[0].shape()[2],
            );
            let spatial = h * w;
            let cpg = c / groups;
            let gsize = cpg * spatial;
            let mut out = vec![0.0; out_len];
            // extra layout: [mean per group | invstd per group].
            let mut extra = vec![0.0; 2 * groups];
            for g in 0..*groups {
                let base = g * gsize;
                let slice = &x[base..base + gsize];
                let mean = slice.iter().sum::<f64>() / gsize as f64;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / gsize as f64;
                let invstd = 1.0 / (var + eps).sqrt();
                extra[g] = mean;
                extra[groups + g] = invstd;
                for c_local in 0..cpg {
                    let ch = g * cpg + c_local;
                    let row = ch * spatial;
                    for p in 0..spatial {
                        let xhat = (x[row + p] - mean) * invstd;
                        out[row + p] = gamma[ch] * xhat + beta[ch];
                    }
                }
            }
            Ok((out, extra))
        }
        PrimitiveKind::Reshape { .. } => Ok((inputs[0].data().to_vec(), Vec::new())),
        PrimitiveKind::TransposeAxes { perm } => {
            let x = inputs[0].data();
            let in_strides = strides(inputs[0].shape());
            let map: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let rank = out_shape.len();
            let mut out = vec![0.0; out_len];
            let mut coords = vec![0usize; rank];
            for slot in out.iter_mut() {
                let mut src = 0;
                for i in 0..rank {
                    src += coords[i] * map[i];
                }
                *slot = x[src];
                for i in (0..rank).rev() {
                    coords[i] += 1;
                    if coords[i] < out_shape[i] {
                        break;
                    }
                    coords[i] = 0;
                }
            }
            Ok((out, Vec::new()))
        }
        PrimitiveKind::Sum => Ok((vec![inputs[0].iter().sum()], Vec::new())),
        PrimitiveKind::SmoothedCrossEntropy { target, smoothing } => {
            let z = inputs[0].data();
            match target {
                Target::Class(cls) => {
                    let l = inputs[0].shape()[0];
                    let (loss, probs) = smoothed_ce_position(z, l, 1, 0, *cls, *smoothing);
                    Ok((vec![loss], probs))
                }
                Target::Mask(mask) => {
                    let s = inputs[0].shape();
                    let (l, spatial) = (s[0], s[1] * s[2]);
                    let mut probs = vec![0.0; z.len()];
                    let mut total = 0.0;
                    for (p, &cls) in mask.iter().enumerate() {
                        let (loss, pix) = smoothed_ce_position(z, l, spatial, p, cls, *smoothing);
                        total += loss;
                        for ch in 0..l {
                            probs[ch * spatial + p] = pix[ch];
                        }
                    }
                    Ok((vec![total / mask.len() as f64], probs))
                }
            }
        }
        PrimitiveKind::KernelExp { scale } => {
            let w = inputs[0].data();
            let k = inputs[0].shape()[2];
            let slices = inputs[0].shape()[0] * inputs[0].shape()[1];
            let mut out = vec![0.0; out_len];
            for s in 0..slices {
                let base = s * k * k;
                let m = SmallMatrix::from_vec(k, w[base..base + k * k].to_vec())
                    .map_err(|e| TensorError::NonFinite(format!("kernel_exp: {e}")))?;
                let exp = matrix_exp(&m, *scale)
                    .map_err(|e| TensorError::NonFinite(format!("kernel_exp: {e}")))?;
                out[base..base + k * k].copy_from_slice(exp.as_slice());
            }
            Ok((out, Vec::new()))
        }
    }
}

/// Label-smoothed cross-entropy at one spatial position of a channel-major
/// logit buffer. Returns the loss and the softmax probabilities there.
fn smoothed_ce_position(
    z: &[f64],
    classes: usize,
    stride: usize,
    offset: usize,
    cls: usize,
    smoothing: f64,
) -> (f64, Vec<f64>) {
    let at = |ch: usize| z[ch * stride + offset];
    let mut max = f64::NEG_INFINITY;
    for ch in 0..classes {
        max = max.max(at(ch));
    }
    let mut denom = 0.0;
    let mut sum_z = 0.0;
    for ch in 0..classes {
        denom += (at(ch) - max).exp();
        sum_z += at(ch);
    }
    let lse = max + denom.ln();
    // -sum_c q_c log p_c with q = (1-eps)*onehot + eps/L collapses to
    // lse - (1-eps)*z_cls - (eps/L)*sum_z because q sums to one.
    let loss = lse - (1.0 - smoothing) * at(cls) - smoothing / classes as f64 * sum_z;
    let probs = (0..classes).map(|ch| (at(ch) - lse).exp()).collect();
    (loss, probs)
}

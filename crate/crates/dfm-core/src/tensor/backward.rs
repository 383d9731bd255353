//! Vector-Jacobian products. One function per recorded node: given the
//! output adjoint, produce an adjoint per input (None where no gradient is
//! needed). Forward activations come from the node; nothing is recomputed.

use super::forward::{conv_span, strides};
use super::{Node, PrimitiveKind, Target};
use crate::linalg::{matrix_exp_series, SmallMatrix};

pub(crate) fn vjp(node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let needs = |i: usize| node.input_needs[i];
    match &node.op {
        PrimitiveKind::Leaf => unreachable!("leaves have no inputs"),
        PrimitiveKind::Conv2d { stride, padding } => {
            let x: &[f64] = &node.input_data[0];
            let w: &[f64] = &node.input_data[1];
            let xs = &node.input_shapes[0];
            let ws = &node.input_shapes[1];
            let (cin, h, win) = (xs[0], xs[1], xs[2]);
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            let (oh, ow) = (node.out_shape[1], node.out_shape[2]);
            let mut dx = needs(0).then(|| vec![0.0; x.len()]);
            let mut dw = needs(1).then(|| vec![0.0; w.len()]);
            for co in 0..cout {
                for ci in 0..cin {
                    let x_base = ci * h * win;
                    let w_base = (co * cin + ci) * kh * kw;
                    for ky in 0..kh {
                        let (oy0, oy1) = conv_span(oh, *stride, ky, *padding, h);
                        for kx in 0..kw {
                            let (ox0, ox1) = conv_span(ow, *stride, kx, *padding, win);
                            if let Some(dx) = dx.as_deref_mut() {
                                let wv = w[w_base + ky * kw + kx];
                                for oy in oy0..oy1 {
                                    let iy = oy * stride + ky - padding;
                                    let g_row = co * oh * ow + oy * ow;
                                    let x_row = x_base + iy * win;
                                    for ox in ox0..ox1 {
                                        let ix = ox * stride + kx - padding;
                                        dx[x_row + ix] += g[g_row + ox] * wv;
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                let mut acc = 0.0;
                                for oy in oy0..oy1 {
                                    let iy = oy * stride + ky - padding;
                                    let g_row = co * oh * ow + oy * ow;
                                    let x_row = x_base + iy * win;
                                    for ox in ox0..ox1 {
                                        let ix = ox * stride + kx - padding;
                                        acc += g[g_row + ox] * x[x_row + ix];
                                    }
                                }
                                dw[w_base + ky * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
            vec![dx, dw]
        }
        PrimitiveKind::MatMul => {
            let a: &[f64] = &node.input_data[0];
            let b: &[f64] = &node.input_data[1];
            let (m, k) = (node.input_shapes[0][0], node.input_shapes[0][1]);
            let n = node.input_shapes[1][1];
            let da = needs(0).then(|| {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b[l * n + j];
                        }
                        da[i * k + l] = acc;
                    }
                }
                da
            });
            let db = needs(1).then(|| {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = a[i * k + l];
                        for j in 0..n {
                            db[l * n + j] += av * g[i * n + j];
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        PrimitiveKind::Add => {
            vec![
                needs(0).then(|| g.to_vec()),
                needs(1).then(|| g.to_vec()),
            ]
        }
        PrimitiveKind::Mul => {
            let a: &[f64] = &node.input_data[0];
            let b: &[f64] = &node.input_data[1];
            vec![
                needs(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                needs(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        PrimitiveKind::ScalarMul { factor } => {
            vec![needs(0).then(|| g.iter().map(|g| g * factor).collect())]
        }
        PrimitiveKind::BiasChannels => {
            let c = node.input_shapes[0][0];
            let spatial = node.input_shapes[0][1] * node.input_shapes[0][2];
            let db = needs(1).then(|| {
                (0..c)
                    .map(|ch| g[ch * spatial..(ch + 1) * spatial].iter().sum())
                    .collect()
            });
            vec![needs(0).then(|| g.to_vec()), db]
        }
        PrimitiveKind::ConcatChannels => {
            // Buffer concatenation forward, buffer split backward.
            let mut offset = 0;
            node.input_shapes
                .iter()
                .enumerate()
                .map(|(i, shape)| {
                    let len: usize = shape.iter().product();
                    let piece = needs(i).then(|| g[offset..offset + len].to_vec());
                    offset += len;
                    piece
                })
                .collect()
        }
        PrimitiveKind::SliceChannels { start, len } => {
            let spatial = node.input_shapes[0][1] * node.input_shapes[0][2];
            let total: usize = node.input_shapes[0].iter().product();
            vec![needs(0).then(|| {
                let mut dx = vec![0.0; total];
                let lo = start * spatial;
                dx[lo..lo + len * spatial].copy_from_slice(g);
                dx
            })]
        }
        PrimitiveKind::SoftmaxChannels => {
            let y: &[f64] = &node.out_data;
            let c = node.out_shape[0];
            let spatial = node.out_shape[1] * node.out_shape[2];
            vec![needs(0).then(|| {
                let mut dx = vec![0.0; y.len()];
                for p in 0..spatial {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += g[ch * spatial + p] * y[ch * spatial + p];
                    }
                    for ch in 0..c {
                        let i = ch * spatial + p;
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                dx
            })]
        }
        PrimitiveKind::Relu => {
            let x: &[f64] = &node.input_data[0];
            vec![needs(0).then(|| {
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect()
            })]
        }
        PrimitiveKind::GlobalAvgPool => {
            let spatial = node.input_shapes[0][1] * node.input_shapes[0][2];
            let c = node.input_shapes[0][0];
            vec![needs(0).then(|| {
                let mut dx = vec![0.0; c * spatial];
                for ch in 0..c {
                    let gv = g[ch] / spatial as f64;
                    dx[ch * spatial..(ch + 1) * spatial].fill(gv);
                }
                dx
            })]
        }
        PrimitiveKind::UpsampleNearest { factor } => {
            let (c, h, w) = (
                node.input_shapes[0][0],
                node.input_shapes[0][1],
                node.input_shapes[0][2],
            );
            let (oh, ow) = (h * factor, w * factor);
            vec![needs(0).then(|| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        let g_row = ch * oh * ow + oy * ow;
                        let x_row = ch * h * w + (oy / factor) * w;
                        for ox in 0..ow {
                            dx[x_row + ox / factor] += g[g_row + ox];
                        }
                    }
                }
                dx
            })]
        }
        PrimitiveKind::GroupNorm { groups, .. } => {
            let x: &[f64] = &node.input_data[0];
            let gamma: &[f64] = &node.input_data[1];
            let c = node.input_shapes[0][0];
            let spatial = node.input_shapes[0][1] * node.input_shapes[0][2];
            let cpg = c / groups;
            let gsize = cpg * spatial;
            let mut dx = needs(0).then(|| vec![0.0; x.len()]);
            let mut dgamma = needs(1).then(|| vec![0.0; c]);
            let mut dbeta = needs(2).then(|| vec![0.0; c]);
            for grp in 0..*groups {
                let mean = node.extra[grp];
                let r = node.extra[groups + grp];
                let mut sum_t = 0.0;
                let mut sum_tx = 0.0;
                for c_local in 0..cpg {
                    let ch = grp * cpg + c_local;
                    let row = ch * spatial;
                    let gam = gamma[ch];
                    for p in 0..spatial {
                        let gv = g[row + p];
                        let xhat = (x[row + p] - mean) * r;
                        sum_t += gv * gam;
                        sum_tx += gv * gam * xhat;
                        if let Some(dgamma) = dgamma.as_deref_mut() {
                            dgamma[ch] += gv * xhat;
                        }
                        if let Some(dbeta) = dbeta.as_deref_mut() {
                            dbeta[ch] += gv;
                        }
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let mean_t = sum_t / gsize as f64;
                    let mean_tx = sum_tx / gsize as f64;
                    for c_local in 0..cpg {
                        let ch = grp * cpg + c_local;
                        let row = ch * spatial;
                        let gam = gamma[ch];
                        for p in 0..spatial {
                            let xhat = (x[row + p] - mean) * r;
                            dx[row + p] = r * (g[row + p] * gam - mean_t - xhat * mean_tx);
                        }
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        }
        PrimitiveKind::Reshape { .. } => vec![needs(0).then(|| g.to_vec())],
        PrimitiveKind::TransposeAxes { perm } => {
            let in_strides = strides(&node.input_shapes[0]);
            let map: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let rank = node.out_shape.len();
            vec![needs(0).then(|| {
                let mut dx = vec![0.0; g.len()];
                let mut coords = vec![0usize; rank];
                for &gv in g {
                    let mut src = 0;
                    for i in 0..rank {
                        src += coords[i] * map[i];
                    }
                    dx[src] = gv;
                    for i in (0..rank).rev() {
                        coords[i] += 1;
                        if coords[i] < node.out_shape[i] {
                            break;
                        }
                        coords[i] = 0;
                    }
                }
                dx
            })]
        }
        PrimitiveKind::Sum => {
            let len: usize = node.input_shapes[0].iter().product();
            vec![needs(0).then(|| vec![g[0]; len])]
        }
        PrimitiveKind::SmoothedCrossEntropy { target, smoothing } => {
            let probs = &node.extra;
            let g0 = g[0];
            vec![needs(0).then(|| match target {
                Target::Class(cls) => {
                    let l = node.input_shapes[0][0];
                    let uniform = smoothing / l as f64;
                    (0..l)
                        .map(|ch| {
                            let q = uniform + if ch == *cls { 1.0 - smoothing } else { 0.0 };
                            g0 * (probs[ch] - q)
                        })
                        .collect()
                }
                Target::Mask(mask) => {
                    let l = node.input_shapes[0][0];
                    let spatial = mask.len();
                    let uniform = smoothing / l as f64;
                    let scale = g0 / spatial as f64;
                    let mut dz = vec![0.0; probs.len()];
                    for (p, &cls) in mask.iter().enumerate() {
                        for ch in 0..l {
                            let q = uniform + if ch == cls { 1.0 - smoothing } else { 0.0 };
                            dz[ch * spatial + p] = scale * (probs[ch * spatial + p] - q);
                        }
                    }
                    dz
                }
            })]
        }
        PrimitiveKind::KernelExp { scale } => {
            let w: &[f64] = &node.input_data[0];
            let k = node.input_shapes[0][2];
            let slices = node.input_shapes[0][0] * node.input_shapes[0][1];
            vec![needs(0).then(|| {
                let mut dw = vec![0.0; w.len()];
                for s in 0..slices {
                    let base = s * k * k;
                    // Adjoint of P = e^{sW} is s * L((sW)^T, G) where L is the
                    // Frechet derivative of exp: the upper-right block of
                    // e^{[[X, G], [0, X]]} with X = (sW)^T. The block matrix
                    // has doubled eigenvalues, so only the series path works.
                    let block = SmallMatrix::from_fn(2 * k, |i, j| match (i < k, j < k) {
                        (true, true) => scale * w[base + j * k + i],
                        (true, false) => g[base + i * k + (j - k)],
                        (false, false) => scale * w[base + (j - k) * k + (i - k)],
                        (false, true) => 0.0,
                    });
                    match block.and_then(|b| matrix_exp_series(&b, 1.0)) {
                        Ok(e) => {
                            for i in 0..k {
                                for j in 0..k {
                                    dw[base + i * k + j] = scale * e[(i, k + j)];
                                }
                            }
                        }
                        // Non-finite adjoints propagate honestly; the optimizer
                        // aborts on them with the parameter name.
                        Err(_) => dw[base..base + k * k].fill(f64::NAN),
                    }
                }
                dw
            })]
        }
    }
}

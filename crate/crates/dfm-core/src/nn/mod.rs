//! Desk-scale residual backbone, prediction heads, named-parameter plumbing,
//! and cost accounting.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::rng::{fill_normal, stream};
use crate::tensor::{PrimitiveKind, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// --- named parameters ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors in a stable (lexicographic) order. The order fixes
/// optimizer traversal and checkpoint layout, which keeps runs reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "{name}: shape/data length mismatch"
        );
        let prev = self.entries.insert(name.clone(), Param { shape, data });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Differentiable view: every parameter becomes a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            map: self
                .entries
                .iter()
                .map(|(n, p)| (n.clone(), tape.leaf(p.shape.clone(), p.data.clone())))
                .collect(),
        }
    }

    /// Frozen view: detached tensors, nothing records on any tape.
    pub fn bind_frozen(&self) -> BoundParams {
        BoundParams {
            map: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Tensor::detached(p.shape.clone(), p.data.clone()),
                    )
                })
                .collect(),
        }
    }
}

/// Parameters materialized as tensors for one forward pass.
pub struct BoundParams {
    map: BTreeMap<String, Tensor>,
}

impl BoundParams {
    /// Assembles a view from tensors the caller already created, e.g. leaves
    /// a gradient checker owns. Later entries win on duplicate names.
    pub fn from_tensors<'a>(pairs: impl IntoIterator<Item = (&'a str, Tensor)>) -> Self {
        BoundParams {
            map: pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.map
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    /// Tape node of a bound leaf, for matching gradients back to names.
    pub fn node_of(&self, name: &str) -> Option<usize> {
        self.map.get(name).and_then(|t| t.node_id())
    }

    /// True when no tensor is attached to a tape (a `bind_frozen` view).
    pub fn is_frozen(&self) -> bool {
        self.map.values().all(|t| t.node_id().is_none())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t))
    }
}

fn gaussian(seed: u64, name: &str, shape: Vec<usize>, fan_in: usize) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    let mut buf = vec![0.0; n];
    fill_normal(
        &mut stream(seed, name, 0),
        &mut buf,
        0.0,
        1.0 / (fan_in as f64).sqrt(),
    );
    (shape, buf)
}

fn insert_conv(params: &mut ParamSet, seed: u64, prefix: &str, cout: usize, cin: usize, k: usize) {
    let name = format!("{prefix}.weight");
    let (shape, data) = gaussian(seed, &name, vec![cout, cin, k, k], cin * k * k);
    params.insert(name, shape, data);
    params.insert(format!("{prefix}.bias"), vec![cout], vec![0.0; cout]);
}

fn insert_norm(params: &mut ParamSet, prefix: &str, channels: usize) {
    params.insert(format!("{prefix}.gamma"), vec![channels], vec![1.0; channels]);
    params.insert(format!("{prefix}.beta"), vec![channels], vec![0.0; channels]);
}

// --- backbone -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classifier,
    Segmenter,
}

#[derive(Debug, Clone)]
pub struct BackboneSpec {
    pub kind: TaskKind,
    pub input_channels: usize,
    pub input_resolution: (usize, usize),
    pub stage_widths: Vec<usize>,
    pub latent_resolution: (usize, usize),
    pub output_channels: usize,
}

/// Channel-group count for normalization: 8 groups, or one per channel when
/// the tensor is narrower than that.
pub fn norm_groups(channels: usize) -> usize {
    channels.min(8)
}

/// Residual convolutional trunk: per stage, a stride-2 entry convolution
/// followed by a two-convolution residual block on the identity shortcut.
#[derive(Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub params: ParamSet,
}

pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Backbone, ModelError> {
    if spec.stage_widths.is_empty() {
        return Err(ModelError::Spec("backbone needs at least one stage".into()));
    }
    if spec.input_channels == 0 || spec.output_channels == 0 {
        return Err(ModelError::Spec("channel counts must be at least 1".into()));
    }
    for (i, &w) in spec.stage_widths.iter().enumerate() {
        if w == 0 {
            return Err(ModelError::Spec(format!("stage {i} has width 0")));
        }
        let g = norm_groups(w);
        if w % g != 0 {
            return Err(ModelError::Spec(format!(
                "stage {i} width {w} not divisible into {g} norm groups"
            )));
        }
    }
    let stride: usize = 1 << spec.stage_widths.len();
    let (h, w) = spec.input_resolution;
    if h % stride != 0 || w % stride != 0 {
        return Err(ModelError::Spec(format!(
            "input resolution {h}x{w} not divisible by total stride {stride}"
        )));
    }
    if spec.latent_resolution != (h / stride, w / stride) {
        return Err(ModelError::Spec(format!(
            "latent resolution {:?} inconsistent with {h}x{w} over stride {stride}",
            spec.latent_resolution
        )));
    }

    let mut params = ParamSet::new();
    let mut cin = spec.input_channels;
    for (i, &width) in spec.stage_widths.iter().enumerate() {
        insert_conv(&mut params, seed, &format!("stage{i}.entry"), width, cin, 3);
        insert_norm(&mut params, &format!("stage{i}.norm0"), width);
        insert_conv(&mut params, seed, &format!("stage{i}.conv1"), width, width, 3);
        insert_norm(&mut params, &format!("stage{i}.norm1"), width);
        insert_conv(&mut params, seed, &format!("stage{i}.conv2"), width, width, 3);
        insert_norm(&mut params, &format!("stage{i}.norm2"), width);
        cin = width;
    }
    insert_conv(&mut params, seed, "proj", spec.output_channels, cin, 1);
    Ok(Backbone {
        spec: spec.clone(),
        params,
    })
}

/// conv -> bias -> group norm, optionally relu.
fn conv_norm(
    tape: &mut Tape,
    p: &BoundParams,
    conv: &str,
    norm: &str,
    x: &Tensor,
    stride: usize,
    relu: bool,
) -> Result<Tensor, ModelError> {
    let y = tape.conv2d(x, p.get(&format!("{conv}.weight"))?, stride, 1)?;
    let y = tape.bias_channels(&y, p.get(&format!("{conv}.bias"))?)?;
    let groups = norm_groups(y.shape()[0]);
    let y = tape.group_norm(
        &y,
        p.get(&format!("{norm}.gamma"))?,
        p.get(&format!("{norm}.beta"))?,
        groups,
    )?;
    Ok(if relu { tape.relu(&y)? } else { y })
}

impl Backbone {
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let want = [
            self.spec.input_channels,
            self.spec.input_resolution.0,
            self.spec.input_resolution.1,
        ];
        if x.shape() != want {
            return Err(ModelError::Spec(format!(
                "input shape {:?} does not match spec {want:?}",
                x.shape()
            )));
        }
        let mut cur = x.clone();
        for i in 0..self.spec.stage_widths.len() {
            let entry = conv_norm(
                tape,
                p,
                &format!("stage{i}.entry"),
                &format!("stage{i}.norm0"),
                &cur,
                2,
                true,
            )?;
            let mid = conv_norm(
                tape,
                p,
                &format!("stage{i}.conv1"),
                &format!("stage{i}.norm1"),
                &entry,
                1,
                true,
            )?;
            let res = conv_norm(
                tape,
                p,
                &format!("stage{i}.conv2"),
                &format!("stage{i}.norm2"),
                &mid,
                1,
                false,
            )?;
            let sum = tape.add(&entry, &res)?;
            cur = tape.relu(&sum)?;
        }
        let proj = tape.conv2d(&cur, p.get("proj.weight")?, 1, 0)?;
        Ok(tape.bias_channels(&proj, p.get("proj.bias")?)?)
    }
}

// --- heads ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classifier,
    Segmenter,
}

/// Decoder G from the latent output component to predictions: global average
/// pool + affine for classification, 1x1 convolution + nearest upsample for
/// segmentation.
#[derive(Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub latent_channels: usize,
    pub classes: usize,
    /// Latent-to-input resolution factor; segmentation only.
    pub upsample: usize,
    pub params: ParamSet,
}

pub fn build_head(
    kind: HeadKind,
    latent_channels: usize,
    classes: usize,
    upsample: usize,
    seed: u64,
) -> Result<Head, ModelError> {
    if latent_channels == 0 || classes == 0 {
        return Err(ModelError::Spec("head needs at least one channel and one class".into()));
    }
    let mut params = ParamSet::new();
    match kind {
        HeadKind::Classifier => {
            let (shape, data) = gaussian(
                seed,
                "head.weight",
                vec![latent_channels, classes],
                latent_channels,
            );
            params.insert("weight", shape, data);
            params.insert("bias", vec![classes], vec![0.0; classes]);
        }
        HeadKind::Segmenter => {
            if upsample == 0 {
                return Err(ModelError::Spec("segmenter upsample factor must be at least 1".into()));
            }
            let (shape, data) = gaussian(
                seed,
                "head.weight",
                vec![classes, latent_channels, 1, 1],
                latent_channels,
            );
            params.insert("weight", shape, data);
            params.insert("bias", vec![classes], vec![0.0; classes]);
        }
    }
    Ok(Head {
        kind,
        latent_channels,
        classes,
        upsample,
        params,
    })
}

pub fn forward_head(
    tape: &mut Tape,
    head: &Head,
    p: &BoundParams,
    u: &Tensor,
) -> Result<Tensor, ModelError> {
    if u.shape().len() != 3 || u.shape()[0] != head.latent_channels {
        return Err(ModelError::Spec(format!(
            "head expects ({}, h, w) input, got {:?}",
            head.latent_channels,
            u.shape()
        )));
    }
    match head.kind {
        HeadKind::Classifier => {
            let pooled = tape.global_avg_pool(u)?;
            let row = tape.reshape(&pooled, vec![1, head.latent_channels])?;
            let logits = tape.matmul(&row, p.get("weight")?)?;
            let flat = tape.reshape(&logits, vec![head.classes])?;
            Ok(tape.add(&flat, p.get("bias")?)?)
        }
        HeadKind::Segmenter => {
            let scores = tape.conv2d(u, p.get("weight")?, 1, 0)?;
            let scores = tape.bias_channels(&scores, p.get("bias")?)?;
            Ok(tape.upsample_nearest(&scores, head.upsample)?)
        }
    }
}

// --- cost accounting --------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct CostReport {
    pub parameter_count: usize,
    pub flops_per_forward: u64,
    pub mean_batch_seconds: f64,
}

/// FLOPs of one node under the conventions documented inline. Multiply-adds
/// count as two operations; pure data movement is free.
fn node_flops(node: &crate::tensor::Node) -> u64 {
    let out_elems: u64 = node.out_shape.iter().product::<usize>() as u64;
    match &node.op {
        PrimitiveKind::Conv2d { .. } => {
            let ws = &node.input_shapes[1];
            out_elems * (ws[1] * ws[2] * ws[3]) as u64 * 2
        }
        PrimitiveKind::MatMul => {
            let (m, k) = (node.input_shapes[0][0], node.input_shapes[0][1]);
            let n = node.input_shapes[1][1];
            (2 * m * k * n) as u64
        }
        PrimitiveKind::Add
        | PrimitiveKind::Mul
        | PrimitiveKind::ScalarMul { .. }
        | PrimitiveKind::BiasChannels
        | PrimitiveKind::Relu => out_elems,
        // exp, max-subtract, divide, plus the denominator accumulation.
        PrimitiveKind::SoftmaxChannels => 4 * out_elems,
        PrimitiveKind::GlobalAvgPool => {
            node.input_shapes[0].iter().product::<usize>() as u64 + out_elems
        }
        // two reduction passes plus normalize and affine, ~7 ops per element.
        PrimitiveKind::GroupNorm { .. } => {
            7 * node.input_shapes[0].iter().product::<usize>() as u64
        }
        PrimitiveKind::Sum => node.input_shapes[0].iter().product::<usize>() as u64,
        // Nominal dense-product cost per slice; resolution-independent.
        PrimitiveKind::KernelExp { .. } => {
            let s = &node.input_shapes[0];
            (s[0] * s[1]) as u64 * (2 * s[2] * s[2] * s[2]) as u64
        }
        PrimitiveKind::Leaf
        | PrimitiveKind::ConcatChannels
        | PrimitiveKind::SliceChannels { .. }
        | PrimitiveKind::UpsampleNearest { .. }
        | PrimitiveKind::Reshape { .. }
        | PrimitiveKind::TransposeAxes { .. }
        | PrimitiveKind::SmoothedCrossEntropy { .. } => 0,
    }
}

/// Sum of forward FLOPs over everything recorded on the tape.
pub fn tape_flops(tape: &Tape) -> u64 {
    tape.nodes.iter().map(node_flops).sum()
}

const COST_WARMUP_BATCHES: usize = 2;
const COST_TIMED_BATCHES: usize = 10;

/// Exact parameter count, FLOPs per forward under the recurrent convention
/// (T x one single pass), and wall-clock per batch measured over
/// 10 batches after 2 warm-ups.
///
/// `single_pass` must run one forward on the given tape with parameters
/// bound as leaves so every op records; `batch` runs one full batch the way
/// the model actually executes it.
pub fn count_cost(
    parameter_count: usize,
    t_steps: usize,
    mut single_pass: impl FnMut(&mut Tape) -> Result<Tensor, ModelError>,
    mut batch: impl FnMut() -> Result<(), ModelError>,
) -> Result<CostReport, ModelError> {
    if t_steps == 0 {
        return Err(ModelError::Spec("cost accounting needs t_steps >= 1".into()));
    }
    let mut tape = Tape::new();
    single_pass(&mut tape)?;
    let flops_per_forward = tape_flops(&tape) * t_steps as u64;

    for _ in 0..COST_WARMUP_BATCHES {
        batch()?;
    }
    let start = Instant::now();
    for _ in 0..COST_TIMED_BATCHES {
        batch()?;
    }
    let mean_batch_seconds = start.elapsed().as_secs_f64() / COST_TIMED_BATCHES as f64;

    Ok(CostReport {
        parameter_count,
        flops_per_forward,
        mean_batch_seconds,
    })
}

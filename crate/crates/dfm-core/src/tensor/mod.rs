//! Dense f64 tensors with a reverse-mode autodiff tape.
//!
//! The tape is a Wengert list: nodes are appended in execution order, so
//! append order is a topological order and backward is a single reverse
//! sweep. Forward activations are saved on the node (no recomputation in
//! backward). Ops on tensors that carry no gradient path run eagerly and
//! record nothing.

mod backward;
mod forward;
mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use std::collections::HashMap;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward requires a tensor recorded on the tape")]
    Detached,
    #[error("seed shape {seed:?} does not match output shape {out:?}")]
    SeedShape { seed: Vec<usize>, out: Vec<usize> },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

fn shape_err(op: &'static str, msg: String) -> TensorError {
    TensorError::ShapeMismatch { op, msg }
}

/// Segmentation or classification target for the fused loss primitive.
#[derive(Debug, Clone)]
pub enum Target {
    Class(usize),
    /// Per-pixel class ids, row-major (H, W); loss averages over pixels.
    Mask(Rc<Vec<usize>>),
}

/// Closed set of differentiable primitives. Attributes ride on the variant,
/// so an op/attribute mismatch is unrepresentable.
#[derive(Debug, Clone)]
pub enum PrimitiveKind {
    /// Differentiable input; created through `Tape::leaf`, never through
    /// `primitive_forward`.
    Leaf,
    /// x: (C_in, H, W), w: (C_out, C_in, kh, kw), zero padding.
    Conv2d { stride: usize, padding: usize },
    /// a: (m, k), b: (k, n).
    MatMul,
    /// Elementwise, identical shapes.
    Add,
    /// Elementwise product, identical shapes.
    Mul,
    ScalarMul { factor: f64 },
    /// x: (C, H, W) plus per-channel bias (C).
    BiasChannels,
    /// Rank-3 inputs sharing (H, W), stacked along channels.
    ConcatChannels,
    /// Rank-3 input, channels [start, start+len).
    SliceChannels { start: usize, len: usize },
    /// Rank-3 input, softmax over the channel axis at each pixel.
    SoftmaxChannels,
    Relu,
    /// (C, H, W) -> (C,).
    GlobalAvgPool,
    /// (C, h, w) -> (C, h*factor, w*factor), nearest neighbor.
    UpsampleNearest { factor: usize },
    /// x: (C, H, W), gamma: (C), beta: (C); statistics per channel group.
    GroupNorm { groups: usize, eps: f64 },
    Reshape { shape: Vec<usize> },
    TransposeAxes { perm: Vec<usize> },
    /// All elements -> shape (1,).
    Sum,
    /// Fused label-smoothed cross-entropy over logits (L,) or (L, H, W).
    SmoothedCrossEntropy { target: Target, smoothing: f64 },
    /// w: (C_out, C_in, k, k); each k x k slice becomes e^{scale * slice}.
    KernelExp { scale: f64 },
}

impl PrimitiveKind {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Leaf => "leaf",
            PrimitiveKind::Conv2d { .. } => "conv2d",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::ScalarMul { .. } => "scalar_mul",
            PrimitiveKind::BiasChannels => "bias_channels",
            PrimitiveKind::ConcatChannels => "concat_channels",
            PrimitiveKind::SliceChannels { .. } => "slice_channels",
            PrimitiveKind::SoftmaxChannels => "softmax_channels",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::GlobalAvgPool => "global_avg_pool",
            PrimitiveKind::UpsampleNearest { .. } => "upsample_nearest",
            PrimitiveKind::GroupNorm { .. } => "group_norm",
            PrimitiveKind::Reshape { .. } => "reshape",
            PrimitiveKind::TransposeAxes { .. } => "transpose_axes",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::SmoothedCrossEntropy { .. } => "smoothed_cross_entropy",
            PrimitiveKind::KernelExp { .. } => "kernel_exp",
        }
    }
}

/// Immutable dense tensor. Cloning shares the buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Rc<Vec<f64>>>,
    node: Option<usize>,
}

impl Tensor {
    /// Tensor with no tape association (inputs, constants, eval results).
    pub fn detached(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor {
            shape,
            data: Rc::new(data),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::detached(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref().map(Vec::as_slice)
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        assert_eq!(grad.len(), self.data.len(), "grad/data length mismatch");
        self.grad = Some(Rc::new(grad));
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Detached copy of this tensor's values.
    pub fn to_detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) struct Node {
    pub op: PrimitiveKind,
    /// Tape ids of differentiable inputs; None for detached inputs.
    pub input_ids: Vec<Option<usize>>,
    /// Which inputs need a gradient computed at all.
    pub input_needs: Vec<bool>,
    pub input_shapes: Vec<Vec<usize>>,
    /// Saved forward activations of every input.
    pub input_data: Vec<Rc<Vec<f64>>>,
    pub out_shape: Vec<usize>,
    pub out_data: Rc<Vec<f64>>,
    /// Extra per-op saved values (softmax probs, norm statistics, ...).
    pub extra: Vec<f64>,
}

/// Append-only autodiff tape.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input tensor.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        let data = Rc::new(data);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: PrimitiveKind::Leaf,
            input_ids: Vec::new(),
            input_needs: Vec::new(),
            input_shapes: Vec::new(),
            input_data: Vec::new(),
            out_shape: shape.clone(),
            out_data: Rc::clone(&data),
            extra: Vec::new(),
        });
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
            node: Some(id),
        }
    }

    /// Applies a primitive, recording a node when any input carries a
    /// gradient path. Pure-value inputs run eagerly and stay detached.
    pub fn primitive_forward(
        &mut self,
        op: PrimitiveKind,
        inputs: &[&Tensor],
    ) -> Result<Tensor, TensorError> {
        if matches!(op, PrimitiveKind::Leaf) {
            return Err(shape_err("leaf", "leaves are created via Tape::leaf".into()));
        }
        let out_shape = forward::infer_shape(&op, inputs)?;
        let (out_data, extra) = forward::evaluate(&op, inputs, &out_shape)?;
        let out_data = Rc::new(out_data);

        let tracked = inputs.iter().any(|t| t.node.is_some());
        if !tracked {
            return Ok(Tensor {
                shape: out_shape,
                data: out_data,
                requires_grad: false,
                grad: None,
                node: None,
            });
        }

        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            input_ids: inputs.iter().map(|t| t.node).collect(),
            input_needs: inputs.iter().map(|t| t.node.is_some()).collect(),
            input_shapes: inputs.iter().map(|t| t.shape.clone()).collect(),
            input_data: inputs.iter().map(|t| Rc::clone(&t.data)).collect(),
            out_shape: out_shape.clone(),
            out_data: Rc::clone(&out_data),
            extra,
        });
        Ok(Tensor {
            shape: out_shape,
            data: out_data,
            requires_grad: true,
            grad: None,
            node: Some(id),
        })
    }

    /// Reverse sweep from a scalar loss. Returns accumulated gradients for
    /// every differentiable leaf, keyed by leaf node id.
    pub fn backward(&self, loss: &Tensor) -> Result<HashMap<usize, Tensor>, TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape.clone()));
        }
        self.backward_seeded(loss, &[1.0])
    }

    /// Reverse sweep with an explicit output adjoint (vector-Jacobian
    /// product). The seed must match the output's element count.
    pub fn backward_seeded(
        &self,
        output: &Tensor,
        seed: &[f64],
    ) -> Result<HashMap<usize, Tensor>, TensorError> {
        let root = output.node.ok_or(TensorError::Detached)?;
        if seed.len() != output.len() {
            return Err(TensorError::SeedShape {
                seed: vec![seed.len()],
                out: output.shape.clone(),
            });
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adjoints[root] = Some(seed.to_vec());

        let mut grads = HashMap::new();
        for id in (0..=root).rev() {
            let Some(adj) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if matches!(node.op, PrimitiveKind::Leaf) {
                grads.insert(
                    id,
                    Tensor::detached(node.out_shape.clone(), adj),
                );
                continue;
            }
            let input_grads = backward::vjp(node, &adj);
            for (slot, grad) in input_grads.into_iter().enumerate() {
                let (Some(grad), Some(input_id)) = (grad, node.input_ids[slot]) else {
                    continue;
                };
                match &mut adjoints[input_id] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += g;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(grads)
    }

    // --- ergonomic wrappers -------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::Conv2d { stride, padding }, &[x, w])
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, x: &Tensor, factor: f64) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::ScalarMul { factor }, &[x])
    }

    pub fn bias_channels(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::BiasChannels, &[x, b])
    }

    pub fn concat_channels(&mut self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::ConcatChannels, inputs)
    }

    pub fn slice_channels(
        &mut self,
        x: &Tensor,
        start: usize,
        len: usize,
    ) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::SliceChannels { start, len }, &[x])
    }

    pub fn softmax_channels(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::SoftmaxChannels, &[x])
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::Relu, &[x])
    }

    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::GlobalAvgPool, &[x])
    }

    pub fn upsample_nearest(&mut self, x: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::UpsampleNearest { factor }, &[x])
    }

    pub fn group_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        groups: usize,
    ) -> Result<Tensor, TensorError> {
        self.primitive_forward(
            PrimitiveKind::GroupNorm { groups, eps: 1e-5 },
            &[x, gamma, beta],
        )
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::Reshape { shape }, &[x])
    }

    pub fn transpose_axes(&mut self, x: &Tensor, perm: Vec<usize>) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::TransposeAxes { perm }, &[x])
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::Sum, &[x])
    }

    pub fn smoothed_cross_entropy(
        &mut self,
        logits: &Tensor,
        target: Target,
        smoothing: f64,
    ) -> Result<Tensor, TensorError> {
        self.primitive_forward(
            PrimitiveKind::SmoothedCrossEntropy { target, smoothing },
            &[logits],
        )
    }

    pub fn kernel_exp(&mut self, w: &Tensor, scale: f64) -> Result<Tensor, TensorError> {
        self.primitive_forward(PrimitiveKind::KernelExp { scale }, &[w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detached_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = Tensor::detached(vec![2], vec![1.0, 2.0]);
        let b = Tensor::detached(vec![2], vec![3.0, 4.0]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
        assert!(c.node_id().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn simple_quadratic_gradient() {
        // loss = sum(x * x), grad = 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3], vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        assert_eq!(loss.item(), 14.0);
        let grads = tape.backward(&loss).unwrap();
        let gx = &grads[&x.node_id().unwrap()];
        assert_eq!(gx.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fused_and_split_graphs_accumulate_identically() {
        // f(x) + g(x) reusing x must equal the sum of the path gradients.
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2], vec![1.5, -0.5]);
        let f = tape.mul(&x, &x).unwrap();
        let g = tape.scalar_mul(&x, 3.0).unwrap();
        let both = tape.add(&f, &g).unwrap();
        let loss = tape.sum(&both).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = &grads[&x.node_id().unwrap()];
        // d/dx (x^2 + 3x) = 2x + 3.
        assert_eq!(gx.data(), &[6.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0]);
        let y = tape.scalar_mul(&x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NonScalarLoss(_))
        ));
        let detached = Tensor::detached(vec![1], vec![1.0]);
        assert!(matches!(
            tape.backward(&detached),
            Err(TensorError::Detached)
        ));
    }
}

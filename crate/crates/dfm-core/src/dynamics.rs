//! Feedback dynamics: the recurrent state update that turns a feedforward
//! backbone into an iterated estimator.
//!
//! State `h = [v | u]` lives at the latent resolution. Channels `[0, B)` are
//! the top-down vector `v` fed back to the input; channels `[B, B+N)` are the
//! readout vector `u` the head decodes. One step evaluates the backbone on
//! `concat(x, softmax(upsample(v)))`, damps the resulting update by an
//! exponential decay in `t`, and adds it to the state:
//!
//! ```text
//! h(t+1) = h(t) + decay(t) * F'(concat(x, softmax(upsample(v(t)))))
//! ```
//!
//! The decay makes step norms summable, so trajectories are Cauchy and the
//! state converges as the horizon grows. Two decay parameterizations are
//! implemented: a spectral form acting on the channel axis through a trained
//! orthogonal basis, and a convolutional form whose kernels are matrix
//! exponentials of trained generators.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::linalg::{self, LinalgError, SmallMatrix};
use crate::nn::{forward_head, Backbone, BoundParams, Head, ModelError, ParamSet};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid dynamics configuration: {0}")]
    Config(String),
    #[error("state diverged at step {t}: |h| = {norm}")]
    NonFiniteState { t: usize, norm: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, DynamicsError> {
    Err(DynamicsError::Config(msg.into()))
}

// ---------------------------------------------------------------------------
// State

/// Latent state of one instance. `v` carries the top-down channels that are
/// fed back to the input; `u` carries the channels the head reads out.
#[derive(Debug, Clone)]
pub struct FeedbackState {
    /// Top-down channels, shape `(B, h_l, w_l)`.
    pub v: Tensor,
    /// Readout channels, shape `(N, h_l, w_l)`.
    pub u: Tensor,
    /// Step counter; `init_state` starts it at zero.
    pub t: usize,
    /// Standard deviation the state was drawn with.
    pub h_init_std: f64,
}

impl FeedbackState {
    pub fn b_channels(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.u.shape()[0]
    }

    /// Detached `(B+N, h_l, w_l)` tensor with `v` stacked before `u`.
    pub fn combined(&self) -> Tensor {
        let (b, n) = (self.b_channels(), self.n_channels());
        let (hl, wl) = (self.v.shape()[1], self.v.shape()[2]);
        let mut data = Vec::with_capacity((b + n) * hl * wl);
        data.extend_from_slice(self.v.data());
        data.extend_from_slice(self.u.data());
        Tensor::detached(vec![b + n, hl, wl], data)
    }
}

/// Draws `h(0) ~ N(0, std^2)` at the latent resolution. The draw must be
/// non-degenerate: a zero-variance start collapses every instance onto the
/// same trajectory and hides feedback effects, so `std <= 0` is rejected.
pub fn init_state(
    b: usize,
    n: usize,
    resolution: (usize, usize),
    std: f64,
    seed: u64,
) -> Result<FeedbackState, DynamicsError> {
    if b == 0 || n == 0 {
        return config_err("state needs at least one feedback and one readout channel");
    }
    if resolution.0 == 0 || resolution.1 == 0 {
        return config_err("latent resolution must be positive");
    }
    if std <= 0.0 || !std.is_finite() {
        return config_err(format!("state std must be positive and finite, got {std}"));
    }
    let (hl, wl) = resolution;
    let mut v = vec![0.0; b * hl * wl];
    let mut u = vec![0.0; n * hl * wl];
    rng::fill_normal(&mut rng::stream(seed, "state.v", 0), &mut v, 0.0, std);
    rng::fill_normal(&mut rng::stream(seed, "state.u", 0), &mut u, 0.0, std);
    Ok(FeedbackState {
        v: Tensor::detached(vec![b, hl, wl], v),
        u: Tensor::detached(vec![n, hl, wl], u),
        t: 0,
        h_init_std: std,
    })
}

// ---------------------------------------------------------------------------
// Spectral decay

/// Channel-axis decay `c -> c * Q e^{(t/tau) Sigma} Q^T` applied at every
/// spatial location. `Sigma` is fixed at `-I`; `Q` is a trained orthogonal
/// basis. With `Q` exactly orthogonal the basis cancels in the forward value
/// (the map is plain scaling by `e^{-t/tau}`), but the literal product is kept
/// on the tape during training so gradients reach `Q`.
#[derive(Debug)]
pub struct DecayOperator {
    /// Channel count the operator acts on (`B + N`).
    pub order: usize,
    /// Decay time constant, positive.
    pub tau: f64,
    /// Fixed spectrum; every entry is -1 and training never touches it.
    pub sigma: Vec<f64>,
    /// Holds `q`, the `(order, order)` orthogonal basis.
    pub params: ParamSet,
}

/// Builds the operator with `Q` drawn orthogonal (QR of a Gaussian matrix).
pub fn build_decay_operator(
    order: usize,
    tau: f64,
    seed: u64,
) -> Result<DecayOperator, DynamicsError> {
    if order == 0 || order > linalg::MAX_ORDER {
        return config_err(format!(
            "decay operator order {order} outside 1..={}",
            linalg::MAX_ORDER
        ));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return config_err(format!("tau must be positive and finite, got {tau}"));
    }
    let mut g = vec![0.0; order * order];
    rng::fill_normal(&mut rng::stream(seed, "decay.q", 0), &mut g, 0.0, 1.0);
    let (q, _r) = linalg::gram_schmidt_qr(&SmallMatrix::from_vec(order, g)?)?;
    let mut params = ParamSet::new();
    params.insert("q", vec![order, order], q.as_slice().to_vec());
    Ok(DecayOperator {
        order,
        tau,
        sigma: vec![-1.0; order],
        params,
    })
}

impl DecayOperator {
    pub fn q_matrix(&self) -> SmallMatrix {
        let p = self.params.get("q").expect("decay operator always holds q");
        SmallMatrix::from_vec(self.order, p.data.clone()).expect("stored q is square")
    }

    /// `max |Q^T Q - I|`, the drift away from orthogonality.
    pub fn orthogonality_residual(&self) -> f64 {
        self.q_matrix().orthogonality_residual()
    }

    /// Scale factor the operator reduces to when `Q` is orthogonal.
    pub fn cancelled_factor(&self, t: usize) -> f64 {
        (-(t as f64) / self.tau).exp()
    }
}

/// Orthogonality drift below this is treated as exact when choosing the
/// cancelled fast path; the trained operator is re-projected far tighter.
const CANCEL_RESIDUAL_TOL: f64 = 1e-8;

/// Which forward realization of the spectral decay to record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayRoute {
    /// Full product `c * Q e^{(t/tau) Sigma} Q^T`; gradients reach `Q`.
    Literal,
    /// Scalar `e^{-t/tau}` multiply; valid only while `Q` is orthogonal.
    Cancelled,
}

/// Applies the spectral decay to an update tensor `(order, h, w)`. Picks the
/// literal route whenever `q` is tracked on the tape (training) or has
/// drifted from orthogonality (ablations); otherwise uses the cancelled
/// scalar path, which is forward-identical and much cheaper.
pub fn exp_decay_apply(
    tape: &mut Tape,
    op: &DecayOperator,
    q: &Tensor,
    delta: &Tensor,
    t: usize,
) -> Result<Tensor, DynamicsError> {
    let route = if q.node_id().is_some() {
        DecayRoute::Literal
    } else {
        let m = SmallMatrix::from_vec(op.order, q.data().to_vec())?;
        if m.orthogonality_residual() < CANCEL_RESIDUAL_TOL {
            DecayRoute::Cancelled
        } else {
            DecayRoute::Literal
        }
    };
    exp_decay_apply_routed(tape, op, q, delta, t, route)
}

/// Route-pinned variant of [`exp_decay_apply`], for tests and diagnostics
/// that need to compare the two realizations directly.
pub fn exp_decay_apply_routed(
    tape: &mut Tape,
    op: &DecayOperator,
    q: &Tensor,
    delta: &Tensor,
    t: usize,
    route: DecayRoute,
) -> Result<Tensor, DynamicsError> {
    if q.shape() != [op.order, op.order] {
        return config_err(format!(
            "q shape {:?} does not match operator order {}",
            q.shape(),
            op.order
        ));
    }
    if delta.shape().len() != 3 || delta.shape()[0] != op.order {
        return config_err(format!(
            "decay input shape {:?} is not (order={}, h, w)",
            delta.shape(),
            op.order
        ));
    }
    if !delta.all_finite() {
        return Err(TensorError::NonFinite("exp_decay_apply input".into()).into());
    }
    match route {
        DecayRoute::Cancelled => Ok(tape.scalar_mul(delta, op.cancelled_factor(t))?),
        DecayRoute::Literal => {
            let c = op.order;
            let (h, w) = (delta.shape()[1], delta.shape()[2]);
            // e^{(t/tau) Sigma} as an explicit diagonal matrix; Sigma is a
            // constant so this factor stays off the tape.
            let mut e = vec![0.0; c * c];
            for (i, s) in op.sigma.iter().enumerate() {
                e[i * c + i] = (t as f64 / op.tau * s).exp();
            }
            let e = Tensor::detached(vec![c, c], e);
            let qt = tape.transpose_axes(q, vec![1, 0])?;
            let qe = tape.matmul(q, &e)?;
            let m = tape.matmul(&qe, &qt)?;
            // Each spatial location holds a channel row vector; decay acts on
            // that axis, so flatten space into rows and multiply once.
            let flat = tape.reshape(delta, vec![c, h * w])?;
            let rows = tape.transpose_axes(&flat, vec![1, 0])?;
            let out_rows = tape.matmul(&rows, &m)?;
            let back = tape.transpose_axes(&out_rows, vec![1, 0])?;
            Ok(tape.reshape(&back, vec![c, h, w])?)
        }
    }
}

// ---------------------------------------------------------------------------
// Convolutional decay

/// How the convolutional decay normalizes its update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    /// Multiply by `1/k`; keeps the update contractive. Default.
    Damp,
    /// Multiply by `k`; deliberately amplifying variant for ablations.
    Amplify,
}

#[derive(Debug)]
struct ConvCache {
    w_snapshot: Vec<f64>,
    kernels: BTreeMap<usize, Rc<Vec<f64>>>,
}

/// Convolutional decay: each (out, in) channel pair owns a trained `k x k`
/// generator `w`; the spatial kernel applied at step `t` is the matrix
/// exponential `e^{(t/tau) w}`, so `t = 0` always yields identity-matrix
/// kernels no matter what training did to `w`.
#[derive(Debug)]
pub struct ConvDecayKernel {
    /// Channel count on both sides of the convolution (`B + N`).
    pub channels: usize,
    /// Spatial kernel size; odd so `same` padding is exact.
    pub k: usize,
    /// Decay time constant, positive.
    pub tau: f64,
    pub z_mode: ZMode,
    /// Holds `w`, shape `(channels, channels, k, k)`.
    pub params: ParamSet,
    /// Frozen-weight kernels by step, dropped whenever `w` changes.
    cache: RefCell<Option<ConvCache>>,
}

pub fn build_conv_decay(
    channels: usize,
    k: usize,
    tau: f64,
    z_mode: ZMode,
    seed: u64,
) -> Result<ConvDecayKernel, DynamicsError> {
    if channels == 0 {
        return config_err("conv decay needs at least one channel");
    }
    if k.is_multiple_of(2) || k == 0 {
        return config_err(format!("conv decay kernel size must be odd, got {k}"));
    }
    // The generator gradient runs through a 2k x 2k block exponential.
    if 2 * k > linalg::MAX_ORDER {
        return config_err(format!(
            "conv decay kernel size {k} exceeds the {} limit",
            linalg::MAX_ORDER / 2
        ));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return config_err(format!("tau must be positive and finite, got {tau}"));
    }
    let mut w = vec![0.0; channels * channels * k * k];
    rng::fill_normal(
        &mut rng::stream(seed, "decay.w", 0),
        &mut w,
        0.0,
        1.0 / k as f64,
    );
    let mut params = ParamSet::new();
    params.insert("w", vec![channels, channels, k, k], w);
    Ok(ConvDecayKernel {
        channels,
        k,
        tau,
        z_mode,
        params,
        cache: RefCell::new(None),
    })
}

impl ConvDecayKernel {
    pub fn z_factor(&self) -> f64 {
        match self.z_mode {
            ZMode::Damp => 1.0 / self.k as f64,
            ZMode::Amplify => self.k as f64,
        }
    }

    /// Exponentiated kernels for frozen weights, memoized per step. The cache
    /// keys on the exact weight values: any change to `w` drops every entry.
    fn kernel_for(&self, w_data: &[f64], t: usize) -> Result<Rc<Vec<f64>>, DynamicsError> {
        let mut cache = self.cache.borrow_mut();
        let stale = match cache.as_ref() {
            Some(c) => c.w_snapshot != w_data,
            None => true,
        };
        if stale {
            *cache = Some(ConvCache {
                w_snapshot: w_data.to_vec(),
                kernels: BTreeMap::new(),
            });
        }
        let c = cache.as_mut().expect("cache populated above");
        if let Some(k) = c.kernels.get(&t) {
            return Ok(Rc::clone(k));
        }
        let kk = self.k * self.k;
        let scale = t as f64 / self.tau;
        let mut out = vec![0.0; w_data.len()];
        for (slice, dst) in w_data.chunks_exact(kk).zip(out.chunks_exact_mut(kk)) {
            let m = SmallMatrix::from_vec(self.k, slice.to_vec())?;
            let e = linalg::matrix_exp(&m, scale)?;
            dst.copy_from_slice(e.as_slice());
        }
        let out = Rc::new(out);
        c.kernels.insert(t, Rc::clone(&out));
        Ok(out)
    }
}

/// Applies the convolutional decay to an update tensor `(channels, h, w)`.
/// When `w` is tracked on the tape the exponentials are recorded as a
/// primitive so gradients reach the generators; frozen weights go through the
/// memoized kernel cache instead.
pub fn conv_exp_decay_apply(
    tape: &mut Tape,
    kern: &ConvDecayKernel,
    w: &Tensor,
    delta: &Tensor,
    t: usize,
) -> Result<Tensor, DynamicsError> {
    let want = [kern.channels, kern.channels, kern.k, kern.k];
    if w.shape() != want {
        return config_err(format!(
            "generator shape {:?} does not match kernel spec {:?}",
            w.shape(),
            want
        ));
    }
    if delta.shape().len() != 3 || delta.shape()[0] != kern.channels {
        return config_err(format!(
            "decay input shape {:?} is not (channels={}, h, w)",
            delta.shape(),
            kern.channels
        ));
    }
    if !delta.all_finite() {
        return Err(TensorError::NonFinite("conv_exp_decay_apply input".into()).into());
    }
    let scale = t as f64 / kern.tau;
    let kernels = if w.node_id().is_some() {
        tape.kernel_exp(w, scale)?
    } else {
        let data = kern.kernel_for(w.data(), t)?;
        Tensor::detached(w.shape().to_vec(), data.as_ref().clone())
    };
    let conv = tape.conv2d(delta, &kernels, 1, kern.k / 2)?;
    Ok(tape.scalar_mul(&conv, kern.z_factor())?)
}

// ---------------------------------------------------------------------------
// Input assembly

/// Concatenates the bottom-up image with the softmaxed, upsampled top-down
/// vector: `(C, H, W) + (B, h_l, w_l) -> (C+B, H, W)`. The feedback enters as
/// a per-pixel distribution over the B channels, so its scale is bounded
/// regardless of how large the state has grown.
pub fn feedback_input(tape: &mut Tape, x: &Tensor, v: &Tensor) -> Result<Tensor, DynamicsError> {
    if x.shape().len() != 3 || v.shape().len() != 3 {
        return config_err(format!(
            "feedback_input wants rank-3 inputs, got {:?} and {:?}",
            x.shape(),
            v.shape()
        ));
    }
    let (xh, xw) = (x.shape()[1], x.shape()[2]);
    let (vh, vw) = (v.shape()[1], v.shape()[2]);
    if vh == 0 || vw == 0 || !xh.is_multiple_of(vh) || !xw.is_multiple_of(vw) || xh / vh != xw / vw
    {
        return config_err(format!(
            "latent resolution ({vh}, {vw}) does not tile the input ({xh}, {xw})"
        ));
    }
    let factor = xh / vh;
    let up = if factor == 1 {
        v.clone()
    } else {
        tape.upsample_nearest(v, factor)?
    };
    let fb = tape.softmax_channels(&up)?;
    Ok(tape.concat_channels(&[x, &fb])?)
}

// ---------------------------------------------------------------------------
// Unroll

/// Decay applied to each update, with its bound parameter tensor.
#[derive(Debug)]
pub enum Decay<'a> {
    Spectral { op: &'a DecayOperator, q: &'a Tensor },
    Conv { kern: &'a ConvDecayKernel, w: &'a Tensor },
    /// No damping at all; the ablation arm that loses convergence.
    Undamped,
}

fn apply_decay(
    tape: &mut Tape,
    decay: &Decay,
    delta: &Tensor,
    t: usize,
) -> Result<Tensor, DynamicsError> {
    match decay {
        Decay::Spectral { op, q } => exp_decay_apply(tape, op, q, delta, t),
        Decay::Conv { kern, w } => conv_exp_decay_apply(tape, kern, w, delta, t),
        Decay::Undamped => Ok(delta.clone()),
    }
}

/// Everything a step needs: the backbone `F'` with its bound parameters, the
/// head `G`, and the decay. The same struct drives training (tracked
/// bindings) and evaluation (frozen bindings).
pub struct DfmPipeline<'a> {
    pub backbone: &'a Backbone,
    pub backbone_params: &'a BoundParams,
    pub head: &'a Head,
    pub head_params: &'a BoundParams,
    pub decay: Decay<'a>,
    pub b_channels: usize,
    pub n_channels: usize,
}

/// Per-step scalars recorded during an unroll, plus the prediction when
/// requested. `norm_step` is `|h(t) - h(t-1)|` and `norm_delta` the update
/// norm before decay; both are zero at `t = 0`.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub norm_h: f64,
    pub norm_step: f64,
    pub norm_delta: f64,
    pub prediction: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Debug)]
pub struct Unrolled {
    /// `G(u(T))`, recorded on the tape so a loss can be attached.
    pub prediction: Tensor,
    pub trajectory: Trajectory,
}

/// Runs the feedback dynamics for `t_steps` Euler steps from `state0` and
/// decodes the final readout. `t_steps = 0` decodes `u(0)` without ever
/// evaluating the backbone. With `mask_feedback` the top-down vector is
/// zeroed for every step after the first, which keeps parameter count and
/// per-step cost identical while removing the information the feedback path
/// carries. A non-finite state aborts with the step index and norm.
pub fn unroll(
    tape: &mut Tape,
    pipe: &DfmPipeline,
    state0: &FeedbackState,
    x: &Tensor,
    t_steps: usize,
    mask_feedback: bool,
    record_predictions: bool,
) -> Result<Unrolled, DynamicsError> {
    let (b, n) = (pipe.b_channels, pipe.n_channels);
    let (hl, wl) = (state0.v.shape()[1], state0.v.shape()[2]);
    if state0.b_channels() != b || state0.n_channels() != n {
        return config_err(format!(
            "state has ({}, {}) channels, pipeline wants ({b}, {n})",
            state0.b_channels(),
            state0.n_channels()
        ));
    }
    if state0.u.shape()[1] != hl || state0.u.shape()[2] != wl {
        return config_err("state v and u disagree on latent resolution".to_string());
    }
    let spec = &pipe.backbone.spec;
    if spec.output_channels != b + n || spec.latent_resolution != (hl, wl) {
        return config_err(format!(
            "backbone emits {} channels at {:?}, state wants {} at ({hl}, {wl})",
            spec.output_channels,
            spec.latent_resolution,
            b + n
        ));
    }
    if x.shape().len() != 3 || x.shape()[0] + b != spec.input_channels {
        return config_err(format!(
            "input shape {:?} plus {b} feedback channels does not match backbone input {}",
            x.shape(),
            spec.input_channels
        ));
    }
    if pipe.head.latent_channels != n {
        return config_err(format!(
            "head reads {} channels, state provides {n}",
            pipe.head.latent_channels
        ));
    }

    // Per-step predictions are diagnostics, not part of the training graph;
    // they run against a frozen view of the head so the tape stays lean.
    let frozen_head = if record_predictions {
        Some(pipe.head.params.bind_frozen())
    } else {
        None
    };
    let record_y = |tape: &mut Tape, h: &Tensor| -> Result<Option<Tensor>, DynamicsError> {
        match &frozen_head {
            Some(params) => {
                let u = tape.slice_channels(&h.to_detached(), b, n)?;
                let y = forward_head(tape, pipe.head, params, &u)?;
                Ok(Some(y.to_detached()))
            }
            None => Ok(None),
        }
    };

    let mut h = tape.concat_channels(&[&state0.v, &state0.u])?;
    let mut trajectory = Trajectory::default();
    trajectory.points.push(TrajectoryPoint {
        t: 0,
        norm_h: h.norm(),
        norm_step: 0.0,
        norm_delta: 0.0,
        prediction: record_y(tape, &h)?,
    });

    for t in 0..t_steps {
        let v = tape.slice_channels(&h, 0, b)?;
        let v_in = if mask_feedback && t > 0 {
            Tensor::zeros(vec![b, hl, wl])
        } else {
            v
        };
        let fi = feedback_input(tape, x, &v_in)?;
        let delta = pipe.backbone.forward(tape, pipe.backbone_params, &fi)?;
        if !delta.all_finite() {
            // A blown-up update is a divergence of the dynamics, not a bad
            // argument: classify it before the decay ops reject their input.
            return Err(DynamicsError::NonFiniteState {
                t: t + 1,
                norm: delta.norm(),
            });
        }
        let decayed = apply_decay(tape, &pipe.decay, &delta, t)?;
        h = tape.add(&h, &decayed)?;
        if !h.all_finite() {
            return Err(DynamicsError::NonFiniteState {
                t: t + 1,
                norm: h.norm(),
            });
        }
        trajectory.points.push(TrajectoryPoint {
            t: t + 1,
            norm_h: h.norm(),
            norm_step: decayed.norm(),
            norm_delta: delta.norm(),
            prediction: record_y(tape, &h)?,
        });
    }

    let u = tape.slice_channels(&h, b, n)?;
    let prediction = forward_head(tape, pipe.head, pipe.head_params, &u)?;
    if record_predictions {
        // The final point's diagnostic prediction equals the taped one (the
        // frozen view binds the same values), so keep the taped copy.
        if let Some(last) = trajectory.points.last_mut() {
            last.prediction = Some(prediction.to_detached());
        }
    }
    Ok(Unrolled {
        prediction,
        trajectory,
    })
}

// ---------------------------------------------------------------------------
// Step-map spectral diagnostics

#[derive(Debug, Clone, Copy)]
pub struct JacobianEstimate {
    /// Power-iteration estimate of the largest singular value of the step
    /// Jacobian `I + d(decayed delta)/dh`.
    pub sigma_max: f64,
    /// False when successive estimates were still moving after `iters`.
    pub converged: bool,
    pub iters_used: usize,
}

/// Relative movement between successive power-iteration estimates below
/// which the iteration is declared converged.
const POWER_ITER_REL_TOL: f64 = 1e-9;

/// Estimates the largest singular value of the step map's Jacobian with
/// respect to the state at `(h, x, t)`. The Jacobian is assembled one row at
/// a time from seeded reverse sweeps, then power iteration runs on `J^T J`.
/// Diagnostic only: cost grows with the squared state dimension, and the
/// pipeline must be bound frozen so the sweeps see a single leaf.
pub fn jacobian_spectral_estimate(
    pipe: &DfmPipeline,
    state: &FeedbackState,
    x: &Tensor,
    t: usize,
    iters: usize,
) -> Result<JacobianEstimate, DynamicsError> {
    if iters < 5 {
        return config_err(format!("power iteration needs at least 5 iterations, got {iters}"));
    }
    if !pipe.backbone_params.is_frozen() {
        return config_err("jacobian estimate needs frozen backbone parameters");
    }
    let decay_tracked = match &pipe.decay {
        Decay::Spectral { q, .. } => q.node_id().is_some(),
        Decay::Conv { w, .. } => w.node_id().is_some(),
        Decay::Undamped => false,
    };
    if decay_tracked || x.node_id().is_some() {
        return config_err("jacobian estimate needs frozen decay parameters and input");
    }

    let (b, n) = (pipe.b_channels, pipe.n_channels);
    let (hl, wl) = (state.v.shape()[1], state.v.shape()[2]);
    let d = (b + n) * hl * wl;

    let mut tape = Tape::new();
    let h = tape.leaf(vec![b + n, hl, wl], state.combined().data().to_vec());
    let h_id = h.node_id().expect("leaf is tracked");
    let v = tape.slice_channels(&h, 0, b)?;
    let fi = feedback_input(&mut tape, x, &v)?;
    let delta = pipe.backbone.forward(&mut tape, pipe.backbone_params, &fi)?;
    let decayed = apply_decay(&mut tape, &pipe.decay, &delta, t)?;
    let h_next = tape.add(&h, &decayed)?;

    // Row i of J is the reverse sweep seeded with basis vector e_i.
    let mut jac = vec![0.0; d * d];
    let mut seed = vec![0.0; d];
    for i in 0..d {
        seed[i] = 1.0;
        let grads = tape.backward_seeded(&h_next, &seed)?;
        seed[i] = 0.0;
        let row = grads
            .get(&h_id)
            .ok_or_else(|| DynamicsError::Config("state leaf received no gradient".into()))?;
        jac[i * d..(i + 1) * d].copy_from_slice(row.data());
    }

    let matvec = |m: &[f64], v: &[f64], transpose: bool| -> Vec<f64> {
        let mut out = vec![0.0; d];
        if transpose {
            for (i, &vi) in v.iter().enumerate() {
                let row = &m[i * d..(i + 1) * d];
                for (o, &mij) in out.iter_mut().zip(row) {
                    *o += mij * vi;
                }
            }
        } else {
            for (o, row) in out.iter_mut().zip(m.chunks_exact(d)) {
                *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
            }
        }
        out
    };
    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut w = vec![0.0; d];
    rng::fill_normal(
        &mut rng::stream(0, "jacobian-power", d as u64),
        &mut w,
        0.0,
        1.0,
    );
    let wn = l2(&w);
    for x in &mut w {
        *x /= wn;
    }

    let mut estimate = 0.0;
    let mut prev = f64::NAN;
    let mut converged = false;
    let mut iters_used = iters;
    for it in 0..iters {
        let jw = matvec(&jac, &w, false);
        let jtjw = matvec(&jac, &jw, true);
        let norm = l2(&jtjw);
        // |J^T J w| with unit w converges to sigma_max^2.
        estimate = norm.sqrt();
        if norm == 0.0 {
            converged = true;
            iters_used = it + 1;
            break;
        }
        for (wi, &zi) in w.iter_mut().zip(&jtjw) {
            *wi = zi / norm;
        }
        if (estimate - prev).abs() <= POWER_ITER_REL_TOL * estimate.max(f64::MIN_POSITIVE) {
            converged = true;
            iters_used = it + 1;
            break;
        }
        prev = estimate;
    }
    Ok(JacobianEstimate {
        sigma_max: estimate,
        converged,
        iters_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_backbone, build_head, BackboneSpec, HeadKind, TaskKind};

    fn tiny_spec(b: usize, n: usize) -> BackboneSpec {
        BackboneSpec {
            kind: TaskKind::Classifier,
            input_channels: 1 + b,
            input_resolution: (8, 8),
            stage_widths: vec![4],
            latent_resolution: (4, 4),
            output_channels: b + n,
        }
    }

    struct Fixture {
        backbone: crate::nn::Backbone,
        head: Head,
        op: DecayOperator,
        b: usize,
        n: usize,
    }

    fn fixture(seed: u64) -> Fixture {
        let (b, n) = (2, 3);
        let backbone = build_backbone(&tiny_spec(b, n), seed).unwrap();
        let head = build_head(HeadKind::Classifier, n, 4, 1, seed ^ 1).unwrap();
        let op = build_decay_operator(b + n, 1.0, seed ^ 2).unwrap();
        Fixture {
            backbone,
            head,
            op,
            b,
            n,
        }
    }

    fn run_unroll(
        fx: &Fixture,
        state: &FeedbackState,
        x: &Tensor,
        t_steps: usize,
        mask: bool,
    ) -> Unrolled {
        let mut tape = Tape::new();
        let bb = fx.backbone.params.bind_frozen();
        let hd = fx.head.params.bind_frozen();
        let opp = fx.op.params.bind_frozen();
        let pipe = DfmPipeline {
            backbone: &fx.backbone,
            backbone_params: &bb,
            head: &fx.head,
            head_params: &hd,
            decay: Decay::Spectral {
                op: &fx.op,
                q: opp.get("q").unwrap(),
            },
            b_channels: fx.b,
            n_channels: fx.n,
        };
        unroll(&mut tape, &pipe, state, x, t_steps, mask, true).unwrap()
    }

    fn sample_x(seed: u64) -> Tensor {
        let mut data = vec![0.0; 64];
        rng::fill_normal(&mut rng::stream(seed, "x", 0), &mut data, 0.0, 1.0);
        Tensor::detached(vec![1, 8, 8], data)
    }

    #[test]
    fn init_state_is_deterministic_and_rejects_zero_std() {
        let a = init_state(2, 3, (4, 4), 0.001, 7).unwrap();
        let b = init_state(2, 3, (4, 4), 0.001, 7).unwrap();
        assert_eq!(a.v.data(), b.v.data());
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.t, 0);
        assert_ne!(a.v.data()[0], a.u.data()[0], "v and u draw from separate streams");
        assert!(init_state(2, 3, (4, 4), 0.0, 7).is_err());
        assert!(init_state(2, 3, (4, 4), -1.0, 7).is_err());
    }

    #[test]
    fn feedback_input_is_a_distribution_over_feedback_channels() {
        let mut tape = Tape::new();
        let x = Tensor::detached(vec![1, 4, 4], (0..16).map(|i| i as f64).collect());
        // Zero logits: every pixel gets a uniform 1/2 across the two channels.
        let v = Tensor::zeros(vec![2, 2, 2]);
        let out = feedback_input(&mut tape, &x, &v).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4]);
        assert_eq!(&out.data()[..16], x.data());
        for &p in &out.data()[16..] {
            assert!((p - 0.5).abs() < 1e-15);
        }
        // Saturated logits pin the distribution within 1e-8.
        let v = Tensor::detached(vec![2, 2, 2], [vec![10.0; 4], vec![-10.0; 4]].concat());
        let out = feedback_input(&mut tape, &x, &v).unwrap();
        for &p in &out.data()[16..32] {
            assert!((p - 1.0).abs() < 1e-8);
        }
        for &p in &out.data()[32..] {
            assert!(p.abs() < 1e-8);
        }
    }

    #[test]
    fn feedback_input_rejects_untileable_latents() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![1, 6, 6]);
        let v = Tensor::zeros(vec![2, 4, 4]);
        assert!(feedback_input(&mut tape, &x, &v).is_err());
        // Mismatched per-axis factors are also rejected.
        let x = Tensor::zeros(vec![1, 8, 4]);
        assert!(feedback_input(&mut tape, &x, &v).is_err());
    }

    #[test]
    fn spectral_decay_routes_agree_and_contract_exactly() {
        let op = build_decay_operator(5, 1.0, 3).unwrap();
        let mut delta_data = vec![0.0; 5 * 4 * 4];
        rng::fill_normal(&mut rng::stream(9, "delta", 0), &mut delta_data, 0.0, 1.0);
        let delta = Tensor::detached(vec![5, 4, 4], delta_data);
        for t in 0..=20 {
            let mut tape = Tape::new();
            let q = op.params.bind_frozen();
            let q = q.get("q").unwrap();
            let lit = exp_decay_apply_routed(&mut tape, &op, q, &delta, t, DecayRoute::Literal)
                .unwrap();
            let can = exp_decay_apply_routed(&mut tape, &op, q, &delta, t, DecayRoute::Cancelled)
                .unwrap();
            for (a, b) in lit.data().iter().zip(can.data()) {
                assert!((a - b).abs() < 1e-12, "routes disagree at t={t}");
            }
            let want = (-(t as f64)).exp() * delta.norm();
            assert!(
                (lit.data().iter().map(|x| x * x).sum::<f64>().sqrt() - want).abs() < 1e-10,
                "contraction broken at t={t}"
            );
            if t == 0 {
                for (a, b) in lit.data().iter().zip(delta.data()) {
                    assert!((a - b).abs() < 1e-12, "t=0 must be the identity");
                }
            }
        }
    }

    #[test]
    fn spectral_decay_literal_route_reaches_q() {
        let op = build_decay_operator(3, 1.0, 11).unwrap();
        let mut tape = Tape::new();
        let bound = op.params.bind(&mut tape);
        let q = bound.get("q").unwrap();
        let delta = Tensor::detached(vec![3, 2, 2], (0..12).map(|i| 0.1 * i as f64).collect());
        let out = exp_decay_apply(&mut tape, &op, q, &delta, 2).unwrap();
        let s = tape.sum(&out).unwrap();
        let grads = tape.backward(&s).unwrap();
        let gq = grads.get(&q.node_id().unwrap()).expect("q gradient exists");
        assert!(gq.data().iter().any(|g| g.abs() > 1e-12));
    }

    #[test]
    fn conv_decay_zero_generator_gives_identity_matrix_kernels() {
        let kern = build_conv_decay(2, 3, 1.0, ZMode::Damp, 5).unwrap();
        let mut zeroed = kern;
        zeroed.params.get_mut("w").unwrap().data.fill(0.0);
        let mut delta_data = vec![0.0; 2 * 4 * 4];
        rng::fill_normal(&mut rng::stream(6, "delta", 0), &mut delta_data, 0.0, 1.0);
        let delta = Tensor::detached(vec![2, 4, 4], delta_data);

        let mut tape = Tape::new();
        let w = zeroed.params.bind_frozen();
        let got = conv_exp_decay_apply(&mut tape, &zeroed, w.get("w").unwrap(), &delta, 7)
            .unwrap();

        // Oracle: convolve with explicit identity-matrix kernels and damp.
        let mut id = vec![0.0; 2 * 2 * 9];
        for pair in 0..4 {
            for i in 0..3 {
                id[pair * 9 + i * 3 + i] = 1.0;
            }
        }
        let idk = Tensor::detached(vec![2, 2, 3, 3], id);
        let conv = tape.conv2d(&delta, &idk, 1, 1).unwrap();
        let want = tape.scalar_mul(&conv, 1.0 / 3.0).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_decay_at_t_zero_ignores_the_generator() {
        // e^{0 * w} = I for every w, so step zero must match the zeroed
        // generator's output exactly.
        let trained = build_conv_decay(2, 3, 1.0, ZMode::Amplify, 8).unwrap();
        let mut zeroed = build_conv_decay(2, 3, 1.0, ZMode::Amplify, 8).unwrap();
        zeroed.params.get_mut("w").unwrap().data.fill(0.0);
        let delta = Tensor::detached(vec![2, 2, 2], (0..8).map(|i| i as f64 - 3.0).collect());
        let mut tape = Tape::new();
        let wt = trained.params.bind_frozen();
        let wz = zeroed.params.bind_frozen();
        let a = conv_exp_decay_apply(&mut tape, &trained, wt.get("w").unwrap(), &delta, 0)
            .unwrap();
        let b = conv_exp_decay_apply(&mut tape, &zeroed, wz.get("w").unwrap(), &delta, 0)
            .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_decay_cache_refreshes_when_weights_change() {
        let mut kern = build_conv_decay(1, 3, 1.0, ZMode::Damp, 13).unwrap();
        let delta = Tensor::detached(vec![1, 3, 3], vec![1.0; 9]);
        let mut tape = Tape::new();
        let before = {
            let w = kern.params.bind_frozen();
            conv_exp_decay_apply(&mut tape, &kern, w.get("w").unwrap(), &delta, 2).unwrap()
        };
        // Same weights, second call: served from cache, identical output.
        let again = {
            let w = kern.params.bind_frozen();
            conv_exp_decay_apply(&mut tape, &kern, w.get("w").unwrap(), &delta, 2).unwrap()
        };
        assert_eq!(before.data(), again.data());
        for x in &mut kern.params.get_mut("w").unwrap().data {
            *x += 0.5;
        }
        let after = {
            let w = kern.params.bind_frozen();
            conv_exp_decay_apply(&mut tape, &kern, w.get("w").unwrap(), &delta, 2).unwrap()
        };
        let moved = before
            .data()
            .iter()
            .zip(after.data())
            .any(|(a, b)| (a - b).abs() > 1e-6);
        assert!(moved, "stale cache: output ignored the weight change");
    }

    #[test]
    fn unroll_zero_steps_decodes_the_initial_state() {
        let fx = fixture(21);
        let state = init_state(fx.b, fx.n, (4, 4), 0.001, 1).unwrap();
        let x = sample_x(2);
        let out = run_unroll(&fx, &state, &x, 0, false);
        assert_eq!(out.trajectory.points.len(), 1);
        assert_eq!(out.prediction.shape(), &[4]);

        // Oracle: decode u(0) directly.
        let mut tape = Tape::new();
        let hd = fx.head.params.bind_frozen();
        let want = forward_head(&mut tape, &fx.head, &hd, &state.u).unwrap();
        for (a, b) in out.prediction.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_unroll_matches_at_step_one_then_diverges() {
        let fx = fixture(33);
        // Zero top-down start: masking cannot change the first step.
        let mut state = init_state(fx.b, fx.n, (4, 4), 0.001, 4).unwrap();
        state.v = Tensor::zeros(vec![fx.b, 4, 4]);
        let x = sample_x(5);

        let open = run_unroll(&fx, &state, &x, 3, false);
        let masked = run_unroll(&fx, &state, &x, 3, true);
        let y1_open = open.trajectory.points[1].prediction.as_ref().unwrap();
        let y1_masked = masked.trajectory.points[1].prediction.as_ref().unwrap();
        for (a, b) in y1_open.data().iter().zip(y1_masked.data()) {
            assert!((a - b).abs() < 1e-12, "masking must not act at t = 1");
        }
        let y3_open = open.trajectory.points[3].prediction.as_ref().unwrap();
        let y3_masked = masked.trajectory.points[3].prediction.as_ref().unwrap();
        let apart = y3_open
            .data()
            .iter()
            .zip(y3_masked.data())
            .any(|(a, b)| (a - b).abs() > 1e-9);
        assert!(apart, "masked and open trajectories should part from t = 2");
    }

    #[test]
    fn unroll_reports_divergence_step() {
        let fx = fixture(40);
        let mut state = init_state(fx.b, fx.n, (4, 4), 0.001, 4).unwrap();
        let mut v = state.v.data().to_vec();
        v[0] = f64::NAN;
        state.v = Tensor::detached(vec![fx.b, 4, 4], v);
        let x = sample_x(5);
        let mut tape = Tape::new();
        let bb = fx.backbone.params.bind_frozen();
        let hd = fx.head.params.bind_frozen();
        let opp = fx.op.params.bind_frozen();
        let pipe = DfmPipeline {
            backbone: &fx.backbone,
            backbone_params: &bb,
            head: &fx.head,
            head_params: &hd,
            decay: Decay::Spectral {
                op: &fx.op,
                q: opp.get("q").unwrap(),
            },
            b_channels: fx.b,
            n_channels: fx.n,
        };
        let err = unroll(&mut tape, &pipe, &state, &x, 2, false, false).unwrap_err();
        match err {
            DynamicsError::Tensor(TensorError::NonFinite(_)) => {}
            DynamicsError::NonFiniteState { .. } => {}
            other => panic!("expected a non-finite abort, got {other}"),
        }
    }

    #[test]
    fn step_jacobian_of_zero_backbone_is_identity() {
        let fx = fixture(55);
        let mut zeroed = build_backbone(&tiny_spec(fx.b, fx.n), 55).unwrap();
        for (name, p) in zeroed.params.iter_mut() {
            if name.contains("conv") || name.contains("entry") || name.contains("proj") {
                p.data.fill(0.0);
            }
        }
        let state = init_state(fx.b, fx.n, (4, 4), 0.001, 6).unwrap();
        let x = sample_x(7);
        let bb = zeroed.params.bind_frozen();
        let hd = fx.head.params.bind_frozen();
        let opp = fx.op.params.bind_frozen();
        let pipe = DfmPipeline {
            backbone: &zeroed,
            backbone_params: &bb,
            head: &fx.head,
            head_params: &hd,
            decay: Decay::Spectral {
                op: &fx.op,
                q: opp.get("q").unwrap(),
            },
            b_channels: fx.b,
            n_channels: fx.n,
        };
        // Zero weights cut every path from h to delta, leaving J = I.
        let est = jacobian_spectral_estimate(&pipe, &state, &x, 1, 50).unwrap();
        assert!(est.converged);
        assert!((est.sigma_max - 1.0).abs() < 1e-6, "got {}", est.sigma_max);
    }

    #[test]
    fn jacobian_estimate_rejects_tracked_parameters() {
        let fx = fixture(60);
        let state = init_state(fx.b, fx.n, (4, 4), 0.001, 6).unwrap();
        let x = sample_x(7);
        let mut tape = Tape::new();
        let bb = fx.backbone.params.bind(&mut tape);
        let hd = fx.head.params.bind_frozen();
        let opp = fx.op.params.bind_frozen();
        let pipe = DfmPipeline {
            backbone: &fx.backbone,
            backbone_params: &bb,
            head: &fx.head,
            head_params: &hd,
            decay: Decay::Spectral {
                op: &fx.op,
                q: opp.get("q").unwrap(),
            },
            b_channels: fx.b,
            n_channels: fx.n,
        };
        assert!(jacobian_spectral_estimate(&pipe, &state, &x, 1, 10).is_err());
        // And the minimum iteration count is enforced.
        let bb = fx.backbone.params.bind_frozen();
        let pipe = DfmPipeline { backbone_params: &bb, ..pipe };
        assert!(jacobian_spectral_estimate(&pipe, &state, &x, 1, 4).is_err());
    }
}

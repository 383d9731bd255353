//! Training loop: label-smoothed loss at the final readout, SGD with a
//! one-cycle schedule and momentum, and the post-update correction that keeps
//! the decay basis a true rotation. Also owns model assembly, so the feedback,
//! masked-feedback, and feedforward configurations are built through one door
//! and stay comparable.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{add_gaussian_noise, metrics, DataError, Dataset, Label};
use crate::dynamics::{
    build_conv_decay, build_decay_operator, init_state, unroll, ConvDecayKernel, Decay,
    DecayOperator, DfmPipeline, DynamicsError, Trajectory, Unrolled, ZMode,
};
use crate::linalg::{self, LinalgError, SmallMatrix};
use crate::nn::{
    build_backbone, build_head, checkpoint, forward_head, Backbone, BackboneSpec, BoundParams,
    Head, HeadKind, ModelError, Param, ParamSet, TaskKind,
};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(String),
    #[error("schedule step {step} is past the end of training ({total} steps)")]
    Schedule { step: usize, total: usize },
    #[error("non-finite gradient in {name}")]
    NonFiniteGrad { name: String },
    #[error("instance {index}: {source}")]
    Instance {
        index: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("log write failed: {0}")]
    Log(#[from] io::Error),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, TrainError> {
    Err(TrainError::Config(msg.into()))
}

// ---------------------------------------------------------------------------
// configuration

/// Which mechanisms stay enabled; all-true is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub exp_decay: bool,
    pub orthogonality: bool,
    pub conv_decay: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { exp_decay: true, orthogonality: true, conv_decay: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    pub label_smoothing: f64,
    pub t_steps: usize,
    pub tau: f64,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub mask_feedback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr_initial: 0.05,
            lr_max: 1.0,
            lr_final: 5e-5,
            label_smoothing: 0.1,
            t_steps: 5,
            tau: 1.0,
            seed: 0,
            ablation: AblationFlags::default(),
            mask_feedback: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("epochs and batch size must be at least 1");
        }
        for (name, lr) in [
            ("lr_initial", self.lr_initial),
            ("lr_max", self.lr_max),
            ("lr_final", self.lr_final),
        ] {
            if lr <= 0.0 || !lr.is_finite() {
                return config_err(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return config_err(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if self.t_steps == 0 {
            return config_err("training needs at least one feedback step");
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return config_err(format!("tau must be positive and finite, got {}", self.tau));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// schedule and optimizer

/// Fraction of total steps spent ramping up to `lr_max`.
pub const WARMUP_FRACTION: f64 = 0.3;

/// One-cycle value at `step`: cosine ramp `lr_initial -> lr_max` over the
/// first 30% of steps, cosine anneal down to `lr_final` over the rest.
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return config_err("schedule needs at least one step");
    }
    if step > total_steps {
        return Err(TrainError::Schedule { step, total: total_steps });
    }
    let warm = WARMUP_FRACTION * total_steps as f64;
    let s = step as f64;
    let lr = if s <= warm {
        let phase = s / warm;
        cfg.lr_initial + (cfg.lr_max - cfg.lr_initial) * (1.0 - (std::f64::consts::PI * phase).cos()) / 2.0
    } else {
        let phase = (s - warm) / (total_steps as f64 - warm);
        cfg.lr_final + (cfg.lr_max - cfg.lr_final) * (1.0 + (std::f64::consts::PI * phase).cos()) / 2.0
    };
    Ok(lr)
}

/// Momentum-SGD bookkeeping. `lr` always holds the schedule value the most
/// recent step used; buffers are keyed by `scope.name` so the three parameter
/// sets cannot collide.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self { step: 0, epoch: 0, lr: 0.0, momentum: 0.9, buffers: BTreeMap::new() }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

/// Heavy-ball update `v <- momentum*v + g; theta <- theta - lr*v` for every
/// named gradient. A non-finite gradient aborts before anything is mutated,
/// so a failed step leaves parameters and buffers untouched.
pub fn sgd_step(
    params: &mut ParamSet,
    scope: &str,
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
    opt: &mut OptimizerState,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGrad { name: format!("{scope}.{name}") });
        }
        match params.get(name) {
            None => return config_err(format!("gradient for unknown parameter {scope}.{name}")),
            Some(p) if p.data.len() != g.len() => {
                return config_err(format!(
                    "gradient for {scope}.{name} has {} values, parameter has {}",
                    g.len(),
                    p.data.len()
                ));
            }
            Some(_) => {}
        }
    }
    let momentum = opt.momentum;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let buf = opt
            .buffers
            .entry(format!("{scope}.{name}"))
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((theta, v), gi) in p.data.iter_mut().zip(buf.iter_mut()).zip(g) {
            *v = momentum * *v + gi;
            *theta -= lr * *v;
        }
    }
    Ok(())
}

/// Projects an updated basis back onto the orthogonal group by taking the Q
/// factor of its QR decomposition. Rank deficiency (a degenerate update)
/// is an error; the caller keeps the previous basis in that case.
pub fn orthogonal_correction(q: &SmallMatrix) -> Result<SmallMatrix, TrainError> {
    let (corrected, _r) = linalg::gram_schmidt_qr(q)?;
    Ok(corrected)
}

// ---------------------------------------------------------------------------
// model assembly

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Unrolled feedback dynamics with a decay operator.
    Dfm,
    /// Single backbone pass straight into the head; the parameter-lean
    /// baseline every comparison runs against.
    Feedforward,
}

/// The trained decay parameters a model owns; `Undamped` is the ablation arm
/// with no damping at all (and the placeholder for feedforward models).
#[derive(Debug)]
pub enum DecayParams {
    Spectral(DecayOperator),
    Conv(ConvDecayKernel),
    Undamped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: TaskKind,
    pub classes: usize,
    pub input_channels: usize,
    pub input_resolution: (usize, usize),
    pub stage_widths: Vec<usize>,
    pub b_channels: usize,
    pub n_channels: usize,
    pub h_init_std: f64,
    /// Spatial size of the convolutional decay kernels, odd.
    pub conv_k: usize,
    pub z_mode: ZMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Classifier,
            classes: 10,
            input_channels: 1,
            input_resolution: (32, 32),
            stage_widths: vec![8, 16],
            b_channels: 10,
            n_channels: 10,
            h_init_std: 1e-3,
            conv_k: 3,
            z_mode: ZMode::Damp,
        }
    }
}

impl ModelConfig {
    /// Classifier sizing with the feedback channel count tied to the class
    /// count, so the softmaxed top-down signal reads as a class belief.
    pub fn classifier(
        classes: usize,
        input_channels: usize,
        input_resolution: (usize, usize),
        stage_widths: Vec<usize>,
    ) -> Self {
        Self {
            task: TaskKind::Classifier,
            classes,
            input_channels,
            input_resolution,
            stage_widths,
            b_channels: classes,
            n_channels: classes,
            ..Self::default()
        }
    }

    pub fn segmenter(
        classes: usize,
        input_channels: usize,
        input_resolution: (usize, usize),
        stage_widths: Vec<usize>,
    ) -> Self {
        Self {
            task: TaskKind::Segmenter,
            classes,
            input_channels,
            input_resolution,
            stage_widths,
            b_channels: classes,
            n_channels: classes,
            ..Self::default()
        }
    }
}

/// A complete trainable configuration: backbone, head, decay parameters, and
/// the unroll settings it was built for.
#[derive(Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub task: TaskKind,
    pub backbone: Backbone,
    pub head: Head,
    pub decay: DecayParams,
    pub b_channels: usize,
    pub n_channels: usize,
    pub t_steps: usize,
    pub tau: f64,
    pub mask_feedback: bool,
    pub h_init_std: f64,
}

/// Leaf tensors for one tape (or frozen copies): backbone set, head set, and
/// the decay parameter when the model has one.
pub struct ModelBindings {
    pub backbone: BoundParams,
    pub head: BoundParams,
    pub decay: Option<Tensor>,
}

pub fn build_model(
    kind: ModelKind,
    mc: &ModelConfig,
    tc: &TrainConfig,
) -> Result<Model, TrainError> {
    tc.validate()?;
    if mc.classes == 0 {
        return config_err("a model needs at least one class");
    }
    if mc.stage_widths.is_empty() {
        return config_err("the backbone needs at least one stage");
    }
    if kind == ModelKind::Feedforward && tc.mask_feedback {
        return config_err("mask_feedback only applies to feedback models");
    }
    let stages = mc.stage_widths.len();
    let latent = (mc.input_resolution.0 >> stages, mc.input_resolution.1 >> stages);
    if latent.0 << stages != mc.input_resolution.0 || latent.1 << stages != mc.input_resolution.1 {
        return config_err(format!(
            "resolution {:?} does not survive {stages} halvings",
            mc.input_resolution
        ));
    }
    let (bb_in, bb_out, b) = match kind {
        ModelKind::Dfm => {
            if mc.b_channels == 0 || mc.n_channels == 0 {
                return config_err("feedback models need B >= 1 and N >= 1");
            }
            (
                mc.input_channels + mc.b_channels,
                mc.b_channels + mc.n_channels,
                mc.b_channels,
            )
        }
        ModelKind::Feedforward => (mc.input_channels, mc.n_channels, 0),
    };
    let spec = BackboneSpec {
        kind: mc.task,
        input_channels: bb_in,
        input_resolution: mc.input_resolution,
        stage_widths: mc.stage_widths.clone(),
        latent_resolution: latent,
        output_channels: bb_out,
    };
    let backbone = build_backbone(&spec, tc.seed)?;
    let (head_kind, upsample) = match mc.task {
        TaskKind::Classifier => (HeadKind::Classifier, 1),
        TaskKind::Segmenter => (HeadKind::Segmenter, mc.input_resolution.0 / latent.0),
    };
    let head = build_head(head_kind, mc.n_channels, mc.classes, upsample, tc.seed ^ 1)?;
    let decay = match kind {
        ModelKind::Feedforward => DecayParams::Undamped,
        ModelKind::Dfm if !tc.ablation.exp_decay => DecayParams::Undamped,
        ModelKind::Dfm if tc.ablation.conv_decay => DecayParams::Conv(build_conv_decay(
            bb_out,
            mc.conv_k,
            tc.tau,
            mc.z_mode,
            tc.seed ^ 2,
        )?),
        ModelKind::Dfm => {
            DecayParams::Spectral(build_decay_operator(bb_out, tc.tau, tc.seed ^ 2)?)
        }
    };
    Ok(Model {
        kind,
        task: mc.task,
        backbone,
        head,
        decay,
        b_channels: b,
        n_channels: mc.n_channels,
        t_steps: tc.t_steps,
        tau: tc.tau,
        mask_feedback: tc.mask_feedback,
        h_init_std: mc.h_init_std,
    })
}

impl Model {
    pub fn name(&self) -> &'static str {
        match (self.kind, self.mask_feedback) {
            (ModelKind::Feedforward, _) => "ff",
            (ModelKind::Dfm, false) => "dfm",
            (ModelKind::Dfm, true) => "dfm_masked",
        }
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    pub fn latent_resolution(&self) -> (usize, usize) {
        self.backbone.spec.latent_resolution
    }

    pub fn parameter_count(&self) -> usize {
        let decay = match &self.decay {
            DecayParams::Spectral(op) => op.params.total_elements(),
            DecayParams::Conv(k) => k.params.total_elements(),
            DecayParams::Undamped => 0,
        };
        self.backbone.params.total_elements() + self.head.params.total_elements() + decay
    }

    fn decay_set(&self) -> Option<&ParamSet> {
        match &self.decay {
            DecayParams::Spectral(op) => Some(&op.params),
            DecayParams::Conv(k) => Some(&k.params),
            DecayParams::Undamped => None,
        }
    }

    fn decay_set_mut(&mut self) -> Option<(&'static str, &mut ParamSet)> {
        match &mut self.decay {
            DecayParams::Spectral(op) => Some(("q", &mut op.params)),
            DecayParams::Conv(k) => Some(("w", &mut k.params)),
            DecayParams::Undamped => None,
        }
    }

    fn decay_tensor(bound: &BoundParams, decay: &DecayParams) -> Option<Tensor> {
        match decay {
            DecayParams::Spectral(_) => Some(bound.get("q").expect("spectral holds q").clone()),
            DecayParams::Conv(_) => Some(bound.get("w").expect("conv holds w").clone()),
            DecayParams::Undamped => None,
        }
    }

    /// Tracked leaves for a training step.
    pub fn bind(&self, tape: &mut Tape) -> ModelBindings {
        let decay = self
            .decay_set()
            .map(|set| set.bind(tape))
            .and_then(|bound| Self::decay_tensor(&bound, &self.decay));
        ModelBindings {
            backbone: self.backbone.params.bind(tape),
            head: self.head.params.bind(tape),
            decay,
        }
    }

    /// Detached copies for evaluation; nothing lands on any tape.
    pub fn bind_frozen(&self) -> ModelBindings {
        let decay = self
            .decay_set()
            .map(|set| set.bind_frozen())
            .and_then(|bound| Self::decay_tensor(&bound, &self.decay));
        ModelBindings {
            backbone: self.backbone.params.bind_frozen(),
            head: self.head.params.bind_frozen(),
            decay,
        }
    }

    fn pipeline<'a>(&'a self, b: &'a ModelBindings) -> Result<DfmPipeline<'a>, TrainError> {
        let decay = match (&self.decay, &b.decay) {
            (DecayParams::Spectral(op), Some(q)) => Decay::Spectral { op, q },
            (DecayParams::Conv(kern), Some(w)) => Decay::Conv { kern, w },
            (DecayParams::Undamped, None) => Decay::Undamped,
            _ => return config_err("bindings do not match the decay parameters"),
        };
        Ok(DfmPipeline {
            backbone: &self.backbone,
            backbone_params: &b.backbone,
            head: &self.head,
            head_params: &b.head,
            decay,
            b_channels: self.b_channels,
            n_channels: self.n_channels,
        })
    }

    /// One prediction: feedback models draw a fresh state from `state_seed`
    /// and unroll `t_steps`; the feedforward baseline is a single pass.
    pub fn predict(
        &self,
        tape: &mut Tape,
        bindings: &ModelBindings,
        x: &Tensor,
        state_seed: u64,
        record_trajectory: bool,
    ) -> Result<Unrolled, TrainError> {
        match self.kind {
            ModelKind::Feedforward => {
                let latent = self.backbone.forward(tape, &bindings.backbone, x)?;
                let prediction = forward_head(tape, &self.head, &bindings.head, &latent)?;
                Ok(Unrolled { prediction, trajectory: Trajectory::default() })
            }
            ModelKind::Dfm => {
                let state = init_state(
                    self.b_channels,
                    self.n_channels,
                    self.latent_resolution(),
                    self.h_init_std,
                    state_seed,
                )?;
                let pipe = self.pipeline(bindings)?;
                Ok(unroll(
                    tape,
                    &pipe,
                    &state,
                    x,
                    self.t_steps,
                    self.mask_feedback,
                    record_trajectory,
                )?)
            }
        }
    }

    /// `max |Q^T Q - I|` when the model carries a spectral basis.
    pub fn q_residual(&self) -> Option<f64> {
        match &self.decay {
            DecayParams::Spectral(op) => Some(op.orthogonality_residual()),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// training log

pub const TRAIN_LOG_HEADER: &str = "epoch,step,lr,loss,metric,q_ortho_residual";

/// Per-step CSV log; the residual column is empty for models without a
/// spectral basis.
pub struct TrainLog {
    w: Box<dyn Write>,
}

impl TrainLog {
    pub fn new(mut w: Box<dyn Write>) -> Result<Self, TrainError> {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
        Ok(Self { w })
    }

    pub fn create(path: &Path) -> Result<Self, TrainError> {
        Self::new(Box::new(BufWriter::new(std::fs::File::create(path)?)))
    }

    fn record(
        &mut self,
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        metric: f64,
        q_residual: Option<f64>,
    ) -> Result<(), TrainError> {
        let q = q_residual.map(|r| r.to_string()).unwrap_or_default();
        writeln!(self.w, "{epoch},{step},{lr},{loss},{metric},{q}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        Ok(self.w.flush()?)
    }
}

// ---------------------------------------------------------------------------
// the epoch loop

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub mean_loss: f64,
    pub metric: f64,
    /// Basis drift after the epoch's last step; spectral models only.
    pub q_residual: Option<f64>,
    /// Corrections that hit a degenerate update and kept the previous basis.
    pub q_retained: usize,
    /// Set when the run stopped on a non-finite state or loss.
    pub diverged: Option<String>,
}

fn diverged_report(model: &Model, reason: String) -> EpochReport {
    EpochReport {
        mean_loss: f64::NAN,
        metric: f64::NAN,
        q_residual: model.q_residual(),
        q_retained: 0,
        diverged: Some(reason),
    }
}

fn collect_grads(bound: &BoundParams, grads: &HashMap<usize, Tensor>) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, t) in bound.iter() {
        if let Some(id) = t.node_id() {
            if let Some(g) = grads.get(&id) {
                out.insert(name.to_string(), g.data().to_vec());
            }
        }
    }
    out
}

/// Task metric over detached predictions: top-1 accuracy for classifiers,
/// mean IoU for segmenters.
fn metric_of(
    task: TaskKind,
    classes: usize,
    preds: &[Tensor],
    labels: &[Label],
) -> Result<f64, TrainError> {
    match task {
        TaskKind::Classifier => {
            let logits: Vec<Vec<f64>> = preds.iter().map(|t| t.data().to_vec()).collect();
            let mut targets = Vec::with_capacity(labels.len());
            for l in labels {
                match l {
                    Label::Class(c) => targets.push(*c),
                    Label::Mask(_) => return config_err("classifier metric got a mask label"),
                }
            }
            Ok(metrics::topk_accuracy(&logits, &targets, 1))
        }
        TaskKind::Segmenter => {
            let mut pred_masks = Vec::with_capacity(preds.len());
            for t in preds {
                pred_masks.push(argmax_mask(t));
            }
            let mut truth = Vec::with_capacity(labels.len());
            for l in labels {
                match l {
                    Label::Mask(m) => truth.push(m.as_ref().clone()),
                    Label::Class(_) => return config_err("segmenter metric got a class label"),
                }
            }
            Ok(metrics::miou(&pred_masks, &truth, classes))
        }
    }
}

/// Per-pixel argmax over the channel axis of `(L, H, W)` logits; ties go to
/// the lower class index, matching the top-k convention.
fn argmax_mask(logits: &Tensor) -> Vec<usize> {
    let shape = logits.shape();
    let (l, hw) = (shape[0], shape[1] * shape[2]);
    let data = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..l {
                if data[c * hw + p] > data[best * hw + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// One pass over the dataset: shuffled mini-batches, a shared tape per batch,
/// loss at the final readout, SGD on every parameter set, and the basis
/// correction after each step that touched Q. Divergence (a non-finite state
/// or loss) is recorded in the report, not raised.
pub fn train_epoch(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    noise_sigma: f64,
    mut log: Option<&mut TrainLog>,
) -> Result<EpochReport, TrainError> {
    cfg.validate()?;
    if ds.is_empty() {
        return config_err("cannot train on an empty dataset");
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return config_err(format!("noise sigma must be finite and >= 0, got {noise_sigma}"));
    }
    let total_steps = cfg.epochs * ds.len().div_ceil(cfg.batch_size);
    let order = rng::shuffled_indices(
        &mut rng::stream(cfg.seed, "train.shuffle", opt.epoch as u64),
        ds.len(),
    );
    let mut draw = rng::stream(cfg.seed, "train.draw", opt.epoch as u64);

    let mut loss_sum = 0.0;
    let mut preds: Vec<Tensor> = Vec::with_capacity(ds.len());
    let mut labels: Vec<Label> = Vec::with_capacity(ds.len());
    let mut q_residual = None;
    let mut q_retained = 0usize;

    for chunk in order.chunks(cfg.batch_size) {
        let lr = onecycle_lr(opt.step, total_steps, cfg)?;
        opt.lr = lr;
        let mut tape = Tape::new();
        let bindings = model.bind(&mut tape);
        let mut batch_loss: Option<Tensor> = None;
        let batch_start = preds.len();
        for &i in chunk {
            // Both seeds are always drawn so instance streams line up across
            // noise settings.
            let noise_seed = draw.gen::<u64>();
            let state_seed = draw.gen::<u64>();
            let x = if noise_sigma > 0.0 {
                add_gaussian_noise(&ds.images[i], noise_sigma, noise_seed)?
            } else {
                ds.images[i].clone()
            };
            let out = match model.predict(&mut tape, &bindings, &x, state_seed, false) {
                Ok(out) => out,
                Err(TrainError::Dynamics(DynamicsError::NonFiniteState { t, norm })) => {
                    return Ok(diverged_report(
                        model,
                        format!("instance {i}: non-finite state at step {t} (|h| = {norm:e})"),
                    ));
                }
                Err(e) => {
                    return Err(TrainError::Instance { index: i, source: Box::new(e) });
                }
            };
            let loss = tape
                .smoothed_cross_entropy(
                    &out.prediction,
                    ds.labels[i].to_target(),
                    cfg.label_smoothing,
                )
                .map_err(|e| TrainError::Instance {
                    index: i,
                    source: Box::new(e.into()),
                })?;
            batch_loss = Some(match batch_loss {
                Some(acc) => tape.add(&acc, &loss)?,
                None => loss,
            });
            preds.push(out.prediction.to_detached());
            labels.push(ds.labels[i].clone());
        }
        let mean = tape.scalar_mul(
            &batch_loss.expect("chunks are never empty"),
            1.0 / chunk.len() as f64,
        )?;
        let loss_value = mean.data()[0];
        if !loss_value.is_finite() {
            return Ok(diverged_report(
                model,
                format!("non-finite loss at optimizer step {}", opt.step),
            ));
        }
        let grad_map = tape.backward(&mean)?;

        let backbone_grads = collect_grads(&bindings.backbone, &grad_map);
        let head_grads = collect_grads(&bindings.head, &grad_map);
        sgd_step(&mut model.backbone.params, "backbone", &backbone_grads, lr, opt)?;
        sgd_step(&mut model.head.params, "head", &head_grads, lr, opt)?;

        let prev_q = match &model.decay {
            DecayParams::Spectral(op) => {
                Some(op.params.get("q").expect("spectral holds q").data.clone())
            }
            _ => None,
        };
        if let Some(grad) = bindings
            .decay
            .as_ref()
            .and_then(|t| t.node_id())
            .and_then(|id| grad_map.get(&id))
        {
            let grad = grad.data().to_vec();
            let (name, set) = model.decay_set_mut().expect("decay binding implies a set");
            let grads = BTreeMap::from([(name.to_string(), grad)]);
            sgd_step(set, "decay", &grads, lr, opt)?;
        }
        if let DecayParams::Spectral(op) = &mut model.decay {
            if cfg.ablation.orthogonality {
                match orthogonal_correction(&op.q_matrix()) {
                    Ok(corrected) => {
                        let q = op.params.get_mut("q").expect("spectral holds q");
                        q.data.copy_from_slice(corrected.as_slice());
                    }
                    Err(_) => {
                        // Degenerate update: stay on the last orthogonal basis.
                        let q = op.params.get_mut("q").expect("spectral holds q");
                        q.data.copy_from_slice(&prev_q.expect("snapshot taken above"));
                        q_retained += 1;
                    }
                }
            }
            q_residual = Some(op.orthogonality_residual());
        }

        let step_metric = metric_of(model.task, model.classes(), &preds[batch_start..], &labels[batch_start..])?;
        if let Some(log) = &mut log {
            log.record(opt.epoch, opt.step, lr, loss_value, step_metric, q_residual)?;
        }
        loss_sum += loss_value * chunk.len() as f64;
        opt.step += 1;
    }
    opt.epoch += 1;
    if let Some(log) = &mut log {
        log.flush()?;
    }
    Ok(EpochReport {
        mean_loss: loss_sum / ds.len() as f64,
        metric: metric_of(model.task, model.classes(), &preds, &labels)?,
        q_residual,
        q_retained,
        diverged: None,
    })
}

/// Runs `cfg.epochs` epochs, stopping early if a run diverges. Returns one
/// report per epoch actually run.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    noise_sigma: f64,
    mut log: Option<&mut TrainLog>,
) -> Result<Vec<EpochReport>, TrainError> {
    let mut reports = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let report = train_epoch(model, ds, cfg, opt, noise_sigma, log.as_deref_mut())?;
        let stop = report.diverged.is_some();
        reports.push(report);
        if stop {
            break;
        }
    }
    Ok(reports)
}

/// Frozen-parameter pass over a dataset; reports mean loss and the task
/// metric. Divergence is recorded the same way as in training.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    noise_sigma: f64,
    label_smoothing: f64,
    seed: u64,
) -> Result<EpochReport, TrainError> {
    if ds.is_empty() {
        return config_err("cannot evaluate on an empty dataset");
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return config_err(format!("noise sigma must be finite and >= 0, got {noise_sigma}"));
    }
    let bindings = model.bind_frozen();
    let mut draw = rng::stream(seed, "eval.draw", 0);
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let noise_seed = draw.gen::<u64>();
        let state_seed = draw.gen::<u64>();
        let x = if noise_sigma > 0.0 {
            add_gaussian_noise(&ds.images[i], noise_sigma, noise_seed)?
        } else {
            ds.images[i].clone()
        };
        let mut tape = Tape::new();
        let out = match model.predict(&mut tape, &bindings, &x, state_seed, false) {
            Ok(out) => out,
            Err(TrainError::Dynamics(DynamicsError::NonFiniteState { t, norm })) => {
                return Ok(diverged_report(
                    model,
                    format!("instance {i}: non-finite state at step {t} (|h| = {norm:e})"),
                ));
            }
            Err(e) => return Err(TrainError::Instance { index: i, source: Box::new(e) }),
        };
        let loss = tape
            .smoothed_cross_entropy(&out.prediction, ds.labels[i].to_target(), label_smoothing)
            .map_err(|e| TrainError::Instance { index: i, source: Box::new(e.into()) })?;
        loss_sum += loss.data()[0];
        preds.push(out.prediction);
    }
    Ok(EpochReport {
        mean_loss: loss_sum / ds.len() as f64,
        metric: metric_of(model.task, model.classes(), &preds, &ds.labels)?,
        q_residual: model.q_residual(),
        q_retained: 0,
        diverged: None,
    })
}

// ---------------------------------------------------------------------------
// checkpoint integration

fn meta(value: f64) -> Param {
    Param { shape: vec![], data: vec![value] }
}

/// Writes every parameter set plus the rank-0 metadata needed to rebuild the
/// model without its original configs.
pub fn save_model(model: &Model, path: &Path) -> Result<(), TrainError> {
    let mut entries: Vec<(String, Param)> = Vec::new();
    for (name, p) in model.backbone.params.iter() {
        entries.push((format!("backbone.{name}"), p.clone()));
    }
    for (name, p) in model.head.params.iter() {
        entries.push((format!("head.{name}"), p.clone()));
    }
    if let Some(set) = model.decay_set() {
        for (name, p) in set.iter() {
            entries.push((format!("decay.{name}"), p.clone()));
        }
    }
    let spec = &model.backbone.spec;
    let kind = match model.kind {
        ModelKind::Dfm => 0.0,
        ModelKind::Feedforward => 1.0,
    };
    let task = match model.task {
        TaskKind::Classifier => 0.0,
        TaskKind::Segmenter => 1.0,
    };
    let (decay_kind, conv_k, z_mode) = match &model.decay {
        DecayParams::Spectral(_) => (0.0, 0.0, 0.0),
        DecayParams::Conv(k) => (
            1.0,
            k.k as f64,
            match k.z_mode {
                ZMode::Damp => 0.0,
                ZMode::Amplify => 1.0,
            },
        ),
        DecayParams::Undamped => (2.0, 0.0, 0.0),
    };
    entries.push(("meta.kind".into(), meta(kind)));
    entries.push(("meta.task".into(), meta(task)));
    entries.push(("meta.classes".into(), meta(model.classes() as f64)));
    entries.push(("meta.input_channels".into(), meta(spec.input_channels as f64)));
    entries.push(("meta.input_h".into(), meta(spec.input_resolution.0 as f64)));
    entries.push(("meta.input_w".into(), meta(spec.input_resolution.1 as f64)));
    entries.push(("meta.b".into(), meta(model.b_channels as f64)));
    entries.push(("meta.n".into(), meta(model.n_channels as f64)));
    entries.push(("meta.t_steps".into(), meta(model.t_steps as f64)));
    entries.push(("meta.tau".into(), meta(model.tau)));
    entries.push(("meta.mask_feedback".into(), meta(model.mask_feedback as u8 as f64)));
    entries.push(("meta.h_init_std".into(), meta(model.h_init_std)));
    entries.push(("meta.decay".into(), meta(decay_kind)));
    entries.push(("meta.conv_k".into(), meta(conv_k)));
    entries.push(("meta.z_mode".into(), meta(z_mode)));
    entries.push((
        "meta.stage_widths".into(),
        Param {
            shape: vec![spec.stage_widths.len()],
            data: spec.stage_widths.iter().map(|&w| w as f64).collect(),
        },
    ));
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(checkpoint::save(path, entries.iter().map(|(n, p)| (n.as_str(), p)))?)
}

pub fn load_model(path: &Path) -> Result<Model, TrainError> {
    let stored: BTreeMap<String, Param> = checkpoint::load(path)?.into_iter().collect();
    let scalar = |name: &str| -> Result<f64, TrainError> {
        match stored.get(name) {
            Some(p) if p.shape.is_empty() && p.data.len() == 1 => Ok(p.data[0]),
            Some(_) => config_err(format!("checkpoint entry {name} is not a scalar")),
            None => config_err(format!("checkpoint is missing {name}")),
        }
    };
    let kind = match scalar("meta.kind")? as i64 {
        0 => ModelKind::Dfm,
        1 => ModelKind::Feedforward,
        other => return config_err(format!("unknown model kind tag {other}")),
    };
    let task = match scalar("meta.task")? as i64 {
        0 => TaskKind::Classifier,
        1 => TaskKind::Segmenter,
        other => return config_err(format!("unknown task tag {other}")),
    };
    let widths = stored
        .get("meta.stage_widths")
        .ok_or_else(|| TrainError::Config("checkpoint is missing meta.stage_widths".into()))?;
    let stage_widths: Vec<usize> = widths.data.iter().map(|&w| w as usize).collect();
    let b = scalar("meta.b")? as usize;
    let input_channels = scalar("meta.input_channels")? as usize;
    let decay_tag = scalar("meta.decay")? as i64;
    let ablation = AblationFlags {
        exp_decay: decay_tag != 2,
        orthogonality: true,
        conv_decay: decay_tag == 1,
    };
    let mc = ModelConfig {
        task,
        classes: scalar("meta.classes")? as usize,
        // The stored count includes the feedback channels; undo that.
        input_channels: input_channels - b,
        input_resolution: (scalar("meta.input_h")? as usize, scalar("meta.input_w")? as usize),
        stage_widths,
        b_channels: b.max(1),
        n_channels: scalar("meta.n")? as usize,
        h_init_std: scalar("meta.h_init_std")?,
        conv_k: if decay_tag == 1 { scalar("meta.conv_k")? as usize } else { 3 },
        z_mode: if scalar("meta.z_mode")? as i64 == 1 { ZMode::Amplify } else { ZMode::Damp },
    };
    let tc = TrainConfig {
        t_steps: (scalar("meta.t_steps")? as usize).max(1),
        tau: scalar("meta.tau")?,
        mask_feedback: scalar("meta.mask_feedback")? != 0.0,
        ablation,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut model = build_model(kind, &mc, &tc)?;
    // t_steps = 0 checkpoints (decode-only models) survive the round trip.
    model.t_steps = scalar("meta.t_steps")? as usize;
    restore_set(&mut model.backbone.params, "backbone", &stored)?;
    restore_set(&mut model.head.params, "head", &stored)?;
    if let Some((_, set)) = model.decay_set_mut() {
        restore_set(set, "decay", &stored)?;
    }
    Ok(model)
}

fn restore_set(
    set: &mut ParamSet,
    scope: &str,
    stored: &BTreeMap<String, Param>,
) -> Result<(), TrainError> {
    for (name, p) in set.iter_mut() {
        let key = format!("{scope}.{name}");
        let Some(s) = stored.get(&key) else {
            return config_err(format!("checkpoint is missing {key}"));
        };
        if s.shape != p.shape {
            return config_err(format!(
                "checkpoint {key} has shape {:?}, model wants {:?}",
                s.shape, p.shape
            ));
        }
        p.data.clone_from(&s.data);
    }
    Ok(())
}

//! Experiment orchestration: builds datasets, sweeps noise levels or per-class
//! budgets across model variants and seeds, and writes CSV results plus SVG
//! charts into an output directory.
//!
//! The two data regimes are mutually exclusive by construction: additive input
//! noise runs on the full training set, and per-class subsampling runs on
//! clean inputs. A config that asks for both at once is rejected up front.
//!
//! Partial failure policy: a run whose training or evaluation diverges writes
//! its rows with `NaN` values and the divergence reason, and the sweep moves
//! on. Only configuration and I/O problems abort an experiment.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::corrupt::{corrupt, Corruption, ALL_KINDS};
use crate::data::idx::load_idx;
use crate::data::metrics::{pca_trajectories, powerlaw_fit, softmax};
use crate::data::synth::{make_synthetic_cls, make_synthetic_seg};
use crate::data::{few_shot_sample, DataError, Dataset, Label, Split};
use crate::nn::{count_cost, ModelError, TaskKind};
use crate::plot::{line_chart, ChartSpec, Series};
use crate::rng;
use crate::tensor::Tape;
use crate::train::{
    build_model, evaluate, train, AblationFlags, Model, ModelConfig, ModelKind, OptimizerState,
    TrainConfig, TrainError, TrainLog,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Config(msg.into()))
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    NoiseSweep,
    FewshotSweep,
    Ablation,
    CorruptionEval,
    TrajectoryExport,
    CostReport,
}

impl ExperimentMode {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::NoiseSweep => "noise_sweep",
            ExperimentMode::FewshotSweep => "fewshot_sweep",
            ExperimentMode::Ablation => "ablation",
            ExperimentMode::CorruptionEval => "corruption_eval",
            ExperimentMode::TrajectoryExport => "trajectory_export",
            ExperimentMode::CostReport => "cost_report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Dfm,
    Ff,
    DfmMasked,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Dfm => "dfm",
            ModelChoice::Ff => "ff",
            ModelChoice::DfmMasked => "dfm_masked",
        }
    }

    fn kind(self) -> ModelKind {
        match self {
            ModelChoice::Ff => ModelKind::Feedforward,
            _ => ModelKind::Dfm,
        }
    }

    fn masked(self) -> bool {
        self == ModelChoice::DfmMasked
    }
}

/// Where the train/test splits come from. An `idx_dir` holds four files named
/// `train-images.idx`, `train-labels.idx`, `test-images.idx`,
/// `test-labels.idx`; the synthetic variants generate their splits in memory
/// from `dataset_seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    IdxDir { path: PathBuf },
    SyntheticCls { train_n: usize, test_n: usize, resolution: (usize, usize) },
    SyntheticSeg { train_n: usize, test_n: usize, resolution: (usize, usize), classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub dataset: DatasetSpec,
    /// Keys the synthetic generators; independent of the training seeds so
    /// every seed trains on the same data.
    pub dataset_seed: u64,
    /// Additive input-noise levels; applied to train and test alike.
    pub sigmas: Vec<f64>,
    /// Per-class training budgets for the few-shot sweep.
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelChoice>,
    /// `kind:severity` specs for corruption_eval; empty means every kind at
    /// severity 0.5.
    pub corruptions: Vec<String>,
    /// Overrides the default backbone stage widths.
    pub stage_widths: Option<Vec<usize>>,
    /// Test instances exported per run in trajectory_export mode.
    pub trajectory_instances: usize,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: ExperimentMode::NoiseSweep,
            dataset: DatasetSpec::SyntheticCls {
                train_n: 128,
                test_n: 64,
                resolution: (16, 16),
            },
            dataset_seed: 0,
            sigmas: vec![0.0],
            shots: Vec::new(),
            seeds: vec![0],
            models: vec![ModelChoice::Dfm, ModelChoice::Ff],
            corruptions: Vec::new(),
            stage_widths: None,
            trajectory_instances: 16,
            train: TrainConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return config_err("at least one seed is required");
        }
        if self.models.is_empty() {
            return config_err("at least one model is required");
        }
        if self.sigmas.is_empty() {
            return config_err("at least one sigma is required (use 0 for clean inputs)");
        }
        for &s in &self.sigmas {
            if !s.is_finite() || s < 0.0 {
                return config_err(format!("sigma must be finite and >= 0, got {s}"));
            }
        }
        if self.shots.contains(&0) {
            return config_err("shots must be at least 1 per class");
        }
        if self.sigmas.iter().any(|&s| s > 0.0) && !self.shots.is_empty() {
            return config_err(
                "input noise and per-class subsampling are mutually exclusive: \
                 noise runs on the full training set, few-shot runs on clean inputs",
            );
        }
        match self.mode {
            ExperimentMode::FewshotSweep if self.shots.is_empty() => {
                config_err("fewshot_sweep needs a non-empty shots list")
            }
            ExperimentMode::TrajectoryExport if self.trajectory_instances < 2 => {
                config_err("trajectory export needs at least 2 instances")
            }
            ExperimentMode::CorruptionEval => {
                for spec in &self.corruptions {
                    Corruption::parse(spec)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// results file

pub const RESULTS_HEADER: &str = "mode,model,sigma,D,seed,metric,value,reason";

/// Appends schema-stable rows to `results.csv`. The `D` column is empty for
/// full-dataset runs; `reason` is empty unless the run diverged.
pub struct ResultsWriter {
    w: BufWriter<File>,
    rows: usize,
}

impl ResultsWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{RESULTS_HEADER}")?;
        Ok(Self { w, rows: 0 })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        mode: ExperimentMode,
        model: &str,
        sigma: f64,
        d: Option<usize>,
        seed: u64,
        metric: &str,
        value: f64,
        reason: &str,
    ) -> Result<(), HarnessError> {
        let d = d.map(|v| v.to_string()).unwrap_or_default();
        let reason = sanitize_field(reason);
        writeln!(
            self.w,
            "{},{model},{sigma},{d},{seed},{metric},{value},{reason}",
            mode.name()
        )?;
        self.rows += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<usize, HarnessError> {
        self.w.flush()?;
        Ok(self.rows)
    }
}

/// Free-text fields must not break the CSV geometry.
fn sanitize_field(s: &str) -> String {
    s.replace(['\n', '\r'], " ").replace(',', ";")
}

#[derive(Debug)]
pub struct RunSummary {
    pub results_path: PathBuf,
    pub rows: usize,
    /// Plots and auxiliary CSVs, in the order they were written.
    pub artifacts: Vec<PathBuf>,
}

// ---------------------------------------------------------------------------
// datasets and model sizing

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset), HarnessError> {
    match spec {
        DatasetSpec::IdxDir { path } => {
            let train = load_idx(
                &path.join("train-images.idx"),
                &path.join("train-labels.idx"),
                Split::Train,
            )?;
            let test = load_idx(
                &path.join("test-images.idx"),
                &path.join("test-labels.idx"),
                Split::Test,
            )?;
            if train.class_count != test.class_count {
                return config_err(format!(
                    "train split has {} classes, test split has {}",
                    train.class_count, test.class_count
                ));
            }
            Ok((train, test))
        }
        DatasetSpec::SyntheticCls { train_n, test_n, resolution: (h, w) } => Ok((
            make_synthetic_cls(*train_n, *h, *w, seed, Split::Train)?,
            make_synthetic_cls(*test_n, *h, *w, seed, Split::Test)?,
        )),
        DatasetSpec::SyntheticSeg { train_n, test_n, resolution: (h, w), classes } => Ok((
            make_synthetic_seg(*train_n, *h, *w, *classes, seed, Split::Train)?,
            make_synthetic_seg(*test_n, *h, *w, *classes, seed, Split::Test)?,
        )),
    }
}

fn task_of(ds: &Dataset) -> Result<TaskKind, HarnessError> {
    match ds.labels.first() {
        Some(Label::Class(_)) => Ok(TaskKind::Classifier),
        Some(Label::Mask(_)) => Ok(TaskKind::Segmenter),
        None => config_err("dataset has no instances"),
    }
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classifier => "top1",
        TaskKind::Segmenter => "miou",
    }
}

/// Sizes a model to a dataset: channel count, resolution, class count, and
/// task kind all come from the data; stage widths default to a two-stage
/// desk-scale backbone.
pub fn default_model_config(
    ds: &Dataset,
    stage_widths: Option<&[usize]>,
) -> Result<ModelConfig, HarnessError> {
    let (c, h, w) = ds.image_shape().ok_or_else(|| {
        HarnessError::Config("dataset has no instances to size the model from".into())
    })?;
    let widths = stage_widths.map(<[usize]>::to_vec).unwrap_or_else(|| vec![8, 16]);
    Ok(match task_of(ds)? {
        TaskKind::Classifier => ModelConfig::classifier(ds.class_count, c, (h, w), widths),
        TaskKind::Segmenter => ModelConfig::segmenter(ds.class_count, c, (h, w), widths),
    })
}

fn model_config_for(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ModelConfig, HarnessError> {
    default_model_config(ds, cfg.stage_widths.as_deref())
}

// ---------------------------------------------------------------------------
// one run = one (model variant, seed, data condition) training + evaluation

struct RunOutcome {
    train_loss: f64,
    train_metric: f64,
    test_loss: f64,
    test_metric: f64,
    /// Empty for a clean run; the divergence description otherwise.
    reason: String,
}

impl RunOutcome {
    fn diverged(reason: &str) -> Self {
        RunOutcome {
            train_loss: f64::NAN,
            train_metric: f64::NAN,
            test_loss: f64::NAN,
            test_metric: f64::NAN,
            reason: reason.to_string(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_and_eval(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    choice: ModelChoice,
    flags: AblationFlags,
    seed: u64,
    sigma: f64,
    log_path: Option<PathBuf>,
) -> Result<(Model, RunOutcome), HarnessError> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.mask_feedback = choice.masked();
    tc.ablation = flags;
    let mc = model_config_for(cfg, train_ds)?;
    let mut model = build_model(choice.kind(), &mc, &tc)?;
    let mut opt = OptimizerState::new();
    let mut log = match log_path {
        Some(p) => Some(TrainLog::create(&p)?),
        None => None,
    };
    let reports = train(&mut model, train_ds, &tc, &mut opt, sigma, log.as_mut())?;
    let last = reports.last().expect("epochs >= 1 is validated");
    if let Some(reason) = &last.diverged {
        return Ok((model, RunOutcome::diverged(reason)));
    }
    let ev = evaluate(&model, test_ds, sigma, tc.label_smoothing, seed)?;
    let outcome = match &ev.diverged {
        Some(reason) => RunOutcome {
            train_loss: last.mean_loss,
            train_metric: last.metric,
            test_loss: f64::NAN,
            test_metric: f64::NAN,
            reason: format!("eval: {reason}"),
        },
        None => RunOutcome {
            train_loss: last.mean_loss,
            train_metric: last.metric,
            test_loss: ev.mean_loss,
            test_metric: ev.metric,
            reason: String::new(),
        },
    };
    Ok((model, outcome))
}

/// The four standard rows every run contributes: loss and task metric, each
/// on the train and test split.
#[allow(clippy::too_many_arguments)]
fn emit_run_rows(
    results: &mut ResultsWriter,
    mode: ExperimentMode,
    model: &str,
    sigma: f64,
    d: Option<usize>,
    seed: u64,
    task: TaskKind,
    out: &RunOutcome,
) -> Result<(), HarnessError> {
    let m = metric_name(task);
    results.row(mode, model, sigma, d, seed, "train_loss", out.train_loss, &out.reason)?;
    results.row(mode, model, sigma, d, seed, &format!("train_{m}"), out.train_metric, &out.reason)?;
    results.row(mode, model, sigma, d, seed, "test_loss", out.test_loss, &out.reason)?;
    results.row(mode, model, sigma, d, seed, &format!("test_{m}"), out.test_metric, &out.reason)?;
    Ok(())
}

fn mean_finite(vals: &[f64]) -> f64 {
    let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

// ---------------------------------------------------------------------------
// the runner

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (train_ds, test_ds) = load_dataset(&cfg.dataset, cfg.dataset_seed)?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return config_err("both splits need at least one instance");
    }
    for &d in &cfg.shots {
        if d * train_ds.class_count > train_ds.len() {
            return config_err(format!(
                "{d} shots per class over {} classes exceeds the {}-instance training set",
                train_ds.class_count,
                train_ds.len()
            ));
        }
    }

    let results_path = cfg.output_dir.join("results.csv");
    let mut results = ResultsWriter::create(&results_path)?;
    let mut artifacts = Vec::new();

    match cfg.mode {
        ExperimentMode::NoiseSweep => {
            run_noise_sweep(cfg, &train_ds, &test_ds, &mut results, &mut artifacts)?
        }
        ExperimentMode::FewshotSweep => {
            run_fewshot_sweep(cfg, &train_ds, &test_ds, &mut results, &mut artifacts)?
        }
        ExperimentMode::Ablation => run_ablation(cfg, &train_ds, &test_ds, &mut results)?,
        ExperimentMode::CorruptionEval => {
            run_corruption_eval(cfg, &train_ds, &test_ds, &mut results)?
        }
        ExperimentMode::TrajectoryExport => {
            run_trajectory_export(cfg, &train_ds, &test_ds, &mut results, &mut artifacts)?
        }
        ExperimentMode::CostReport => run_cost_report(cfg, &train_ds, &test_ds, &mut artifacts)?,
    }

    let rows = results.finish()?;
    Ok(RunSummary { results_path, rows, artifacts })
}

fn run_noise_sweep(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    results: &mut ResultsWriter,
    artifacts: &mut Vec<PathBuf>,
) -> Result<(), HarnessError> {
    let task = task_of(train_ds)?;
    let logs = cfg.output_dir.join("logs");
    fs::create_dir_all(&logs)?;
    let mut curves = Vec::new();
    for &choice in &cfg.models {
        let mut points = Vec::new();
        for &sigma in &cfg.sigmas {
            let mut vals = Vec::new();
            for &seed in &cfg.seeds {
                let log = logs.join(format!("noise_{}_sigma{sigma}_seed{seed}.csv", choice.name()));
                let (_, out) = train_and_eval(
                    cfg,
                    train_ds,
                    test_ds,
                    choice,
                    cfg.train.ablation,
                    seed,
                    sigma,
                    Some(log),
                )?;
                emit_run_rows(results, cfg.mode, choice.name(), sigma, None, seed, task, &out)?;
                vals.push(out.test_metric);
            }
            points.push((sigma, mean_finite(&vals)));
        }
        curves.push(Series::line(choice.name(), points));
    }
    let m = metric_name(task);
    let svg = line_chart(
        &ChartSpec {
            title: format!("test {m} vs input noise"),
            x_label: "sigma".into(),
            y_label: format!("test {m}"),
            log_x: false,
            log_y: false,
        },
        &curves,
    );
    let path = cfg.output_dir.join("noise_sweep.svg");
    fs::write(&path, svg)?;
    artifacts.push(path);
    Ok(())
}

pub const POWERLAW_HEADER: &str =
    "model,slope,intercept,r_squared,p_value,used_points,dropped_points";

fn run_fewshot_sweep(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    results: &mut ResultsWriter,
    artifacts: &mut Vec<PathBuf>,
) -> Result<(), HarnessError> {
    let task = task_of(train_ds)?;
    let logs = cfg.output_dir.join("logs");
    fs::create_dir_all(&logs)?;
    let mut curves = Vec::new();
    let mut fits = Vec::new();
    for &choice in &cfg.models {
        let mut points = Vec::new();
        for &d in &cfg.shots {
            let mut vals = Vec::new();
            for &seed in &cfg.seeds {
                let sampled = few_shot_sample(train_ds, d, seed)?;
                let log = logs.join(format!("fewshot_{}_d{d}_seed{seed}.csv", choice.name()));
                let (_, out) = train_and_eval(
                    cfg,
                    &sampled,
                    test_ds,
                    choice,
                    cfg.train.ablation,
                    seed,
                    0.0,
                    Some(log),
                )?;
                emit_run_rows(results, cfg.mode, choice.name(), 0.0, Some(d), seed, task, &out)?;
                vals.push(out.test_metric);
            }
            points.push((d as f64, mean_finite(&vals)));
        }
        let ds: Vec<f64> = points.iter().map(|p| p.0).collect();
        let accs: Vec<f64> = points.iter().map(|p| p.1).collect();
        // A fit over too few (or non-positive) points is skipped, not fatal:
        // the sweep's measurements stand on their own.
        if let Ok(fit) = powerlaw_fit(&ds, &accs) {
            let fitted = points
                .iter()
                .map(|&(d, _)| (d, fit.intercept.exp() * d.powf(fit.slope)))
                .collect();
            curves.push(Series {
                name: format!("{} fit", choice.name()),
                points: fitted,
                dashed: true,
                emphasize_start: false,
            });
            fits.push((choice.name(), fit));
        }
        curves.push(Series::line(choice.name(), points));
    }

    if !fits.is_empty() {
        let path = cfg.output_dir.join("powerlaw.csv");
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{POWERLAW_HEADER}")?;
        for (name, f) in &fits {
            writeln!(
                w,
                "{name},{},{},{},{},{},{}",
                f.slope, f.intercept, f.r_squared, f.p_value, f.used_points, f.dropped_points
            )?;
        }
        w.flush()?;
        artifacts.push(path);
    }

    let m = metric_name(task);
    let svg = line_chart(
        &ChartSpec {
            title: format!("test {m} vs per-class budget"),
            x_label: "D (instances per class)".into(),
            y_label: format!("test {m}"),
            log_x: true,
            log_y: true,
        },
        &curves,
    );
    let path = cfg.output_dir.join("fewshot_sweep.svg");
    fs::write(&path, svg)?;
    artifacts.push(path);
    Ok(())
}

/// The ablation grid: the full model, each stabilizer removed on its own, and
/// the convolutional decay variant.
pub const ABLATION_GRID: [(&str, AblationFlags); 4] = [
    ("dfm", AblationFlags { exp_decay: true, orthogonality: true, conv_decay: false }),
    ("dfm_no_decay", AblationFlags { exp_decay: false, orthogonality: true, conv_decay: false }),
    ("dfm_no_ortho", AblationFlags { exp_decay: true, orthogonality: false, conv_decay: false }),
    ("dfm_conv_decay", AblationFlags { exp_decay: true, orthogonality: true, conv_decay: true }),
];

fn run_ablation(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    results: &mut ResultsWriter,
) -> Result<(), HarnessError> {
    let task = task_of(train_ds)?;
    let sigma = cfg.sigmas[0];
    let logs = cfg.output_dir.join("logs");
    fs::create_dir_all(&logs)?;
    for (name, flags) in ABLATION_GRID {
        for &seed in &cfg.seeds {
            let log = logs.join(format!("ablation_{name}_seed{seed}.csv"));
            let (_, out) = train_and_eval(
                cfg,
                train_ds,
                test_ds,
                ModelChoice::Dfm,
                flags,
                seed,
                sigma,
                Some(log),
            )?;
            emit_run_rows(results, cfg.mode, name, sigma, None, seed, task, &out)?;
        }
    }
    Ok(())
}

/// Applies one corruption to every image; per-image seeds come from the run
/// seed only, so all model variants see identical corrupted inputs.
pub fn corrupted_dataset(ds: &Dataset, c: &Corruption, seed: u64) -> Result<Dataset, HarnessError> {
    let mut images = Vec::with_capacity(ds.len());
    for (i, img) in ds.images.iter().enumerate() {
        images.push(corrupt(img, c, rng::derive_seed(seed, "corrupt.eval", i as u64))?);
    }
    Ok(Dataset::new(images, ds.labels.clone(), ds.split, ds.class_count)?)
}

fn run_corruption_eval(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    results: &mut ResultsWriter,
) -> Result<(), HarnessError> {
    let task = task_of(train_ds)?;
    let m = metric_name(task);
    let specs: Vec<Corruption> = if cfg.corruptions.is_empty() {
        ALL_KINDS.iter().map(|&kind| Corruption { kind, severity: 0.5 }).collect()
    } else {
        cfg.corruptions
            .iter()
            .map(|s| Corruption::parse(s))
            .collect::<Result<_, _>>()?
    };
    let sigma = cfg.sigmas[0];
    for &choice in &cfg.models {
        for &seed in &cfg.seeds {
            let (model, out) = train_and_eval(
                cfg,
                train_ds,
                test_ds,
                choice,
                cfg.train.ablation,
                seed,
                sigma,
                None,
            )?;
            emit_run_rows(results, cfg.mode, choice.name(), sigma, None, seed, task, &out)?;
            if !out.reason.is_empty() {
                continue;
            }
            for c in &specs {
                let corrupted = corrupted_dataset(test_ds, c, seed)?;
                let ev = evaluate(&model, &corrupted, 0.0, cfg.train.label_smoothing, seed)?;
                let (value, reason) = match &ev.diverged {
                    Some(r) => (f64::NAN, r.as_str()),
                    None => (ev.metric, ""),
                };
                results.row(
                    cfg.mode,
                    choice.name(),
                    c.severity,
                    None,
                    seed,
                    &format!("test_{m}[{}]", c.kind.name()),
                    value,
                    reason,
                )?;
            }
        }
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub const TRAJECTORY_HEADER_PREFIX: &str =
    "model,seed,instance,t,norm_h,norm_step,norm_delta,pred_class";

/// Streams per-step unroll records as CSV rows (fixed norm columns, then one
/// probability column per class) and hands back each instance's softmaxed
/// belief path for projection.
pub struct TrajectoryWriter<W: Write> {
    w: W,
    classes: usize,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut w: W, classes: usize) -> Result<Self, HarnessError> {
        write!(w, "{TRAJECTORY_HEADER_PREFIX}")?;
        for c in 0..classes {
            write!(w, ",p{c}")?;
        }
        writeln!(w)?;
        Ok(Self { w, classes })
    }

    pub fn record(
        &mut self,
        model: &str,
        seed: u64,
        instance: usize,
        trajectory: &crate::dynamics::Trajectory,
    ) -> Result<Vec<Vec<f64>>, HarnessError> {
        let mut beliefs = Vec::with_capacity(trajectory.points.len());
        for p in &trajectory.points {
            let logits = p.prediction.as_ref().ok_or_else(|| {
                HarnessError::Config("trajectory point has no recorded prediction".into())
            })?;
            if logits.data().len() != self.classes {
                return config_err(format!(
                    "trajectory prediction has {} values, expected {} classes",
                    logits.data().len(),
                    self.classes
                ));
            }
            let probs = softmax(logits.data());
            write!(
                self.w,
                "{model},{seed},{instance},{},{},{},{},{}",
                p.t,
                p.norm_h,
                p.norm_step,
                p.norm_delta,
                argmax(&probs)
            )?;
            for v in &probs {
                write!(self.w, ",{v}")?;
            }
            writeln!(self.w)?;
            beliefs.push(probs);
        }
        Ok(beliefs)
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        Ok(self.w.flush()?)
    }
}

fn run_trajectory_export(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    results: &mut ResultsWriter,
    artifacts: &mut Vec<PathBuf>,
) -> Result<(), HarnessError> {
    let task = task_of(train_ds)?;
    if task != TaskKind::Classifier {
        return config_err("trajectory export projects per-step class beliefs; use a classification dataset");
    }
    let classes = train_ds.class_count;
    let instances = cfg.trajectory_instances.min(test_ds.len());
    let sigma = cfg.sigmas[0];

    let traj_path = cfg.output_dir.join("trajectories.csv");
    let mut traj = TrajectoryWriter::new(BufWriter::new(File::create(&traj_path)?), classes)?;

    let pca_path = cfg.output_dir.join("pca.csv");
    let mut pca_w = BufWriter::new(File::create(&pca_path)?);
    writeln!(pca_w, "model,seed,instance,t,pc1,pc2")?;

    for &choice in &cfg.models {
        if choice == ModelChoice::Ff {
            // A single forward pass has no internal trajectory to export.
            continue;
        }
        for &seed in &cfg.seeds {
            let (model, out) = train_and_eval(
                cfg,
                train_ds,
                test_ds,
                choice,
                cfg.train.ablation,
                seed,
                sigma,
                None,
            )?;
            emit_run_rows(results, cfg.mode, choice.name(), sigma, None, seed, task, &out)?;
            if !out.reason.is_empty() {
                continue;
            }
            let bindings = model.bind_frozen();
            let mut belief_paths: Vec<Vec<Vec<f64>>> = Vec::with_capacity(instances);
            for i in 0..instances {
                let state_seed = rng::derive_seed(seed, "traj", i as u64);
                let mut tape = Tape::new();
                let unrolled = model
                    .predict(&mut tape, &bindings, &test_ds.images[i], state_seed, true)?;
                belief_paths.push(traj.record(choice.name(), seed, i, &unrolled.trajectory)?);
            }

            let projection = pca_trajectories(&belief_paths)?;
            let mut series = Vec::with_capacity(projection.paths.len());
            for (i, path) in projection.paths.iter().enumerate() {
                for (t, &(pc1, pc2)) in path.iter().enumerate() {
                    writeln!(pca_w, "{},{seed},{i},{t},{pc1},{pc2}", choice.name())?;
                }
                series.push(Series {
                    name: format!("i{i}"),
                    points: path.clone(),
                    dashed: false,
                    emphasize_start: true,
                });
            }
            let svg = line_chart(
                &ChartSpec {
                    title: format!(
                        "{} seed {seed} belief paths (var {:.3}/{:.3})",
                        choice.name(),
                        projection.explained[0],
                        projection.explained[1]
                    ),
                    x_label: "pc1".into(),
                    y_label: "pc2".into(),
                    log_x: false,
                    log_y: false,
                },
                &series,
            );
            let path = cfg
                .output_dir
                .join(format!("trajectories_{}_seed{seed}.svg", choice.name()));
            fs::write(&path, svg)?;
            artifacts.push(path);
        }
    }
    traj.flush()?;
    pca_w.flush()?;
    artifacts.push(traj_path);
    artifacts.push(pca_path);
    Ok(())
}

pub const COST_HEADER: &str = "model,parameters,flops_per_forward,mean_batch_seconds";

fn run_cost_report(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    artifacts: &mut Vec<PathBuf>,
) -> Result<(), HarnessError> {
    let to_model_err = |e: TrainError| ModelError::Spec(e.to_string());
    let path = cfg.output_dir.join("cost.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "{COST_HEADER}")?;
    let x = &test_ds.images[0];
    for &choice in &cfg.models {
        let mut tc = cfg.train.clone();
        tc.seed = cfg.seeds[0];
        tc.mask_feedback = choice.masked();
        let mc = model_config_for(cfg, train_ds)?;
        let model = build_model(choice.kind(), &mc, &tc)?;
        let mut tc1 = tc.clone();
        tc1.t_steps = 1;
        let single = build_model(choice.kind(), &mc, &tc1)?;
        let t_mult = match choice.kind() {
            ModelKind::Dfm => tc.t_steps,
            ModelKind::Feedforward => 1,
        };
        let bindings = model.bind_frozen();
        let batch_n = tc.batch_size.min(test_ds.len());
        let report = count_cost(
            model.parameter_count(),
            t_mult,
            |tape| {
                let b = single.bind(tape);
                single
                    .predict(tape, &b, x, 0, false)
                    .map(|u| u.prediction)
                    .map_err(to_model_err)
            },
            || {
                for i in 0..batch_n {
                    let mut tape = Tape::new();
                    model
                        .predict(&mut tape, &bindings, &test_ds.images[i], i as u64, false)
                        .map_err(to_model_err)?;
                }
                Ok(())
            },
        )?;
        writeln!(
            w,
            "{},{},{},{}",
            choice.name(),
            report.parameter_count,
            report.flops_per_forward,
            report.mean_batch_seconds
        )?;
    }
    w.flush()?;
    artifacts.push(path);
    Ok(())
}

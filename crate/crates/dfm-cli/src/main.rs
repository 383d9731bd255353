//! `dfm`: train, evaluate, and sweep deep feedback models from the terminal.
//!
//! The heavy lifting lives in `dfm-core`; this binary is argument parsing,
//! a little dataset plumbing, and progress output. Every run is fully
//! determined by its seed arguments — two invocations with the same flags
//! write byte-identical CSVs.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dfm_core::data::corrupt::Corruption;
use dfm_core::data::idx::{dataset_to_idx, save_idx};
use dfm_core::data::synth::make_synthetic_cls;
use dfm_core::data::{few_shot_sample, Dataset, Split};
use dfm_core::harness::{
    corrupted_dataset, default_model_config, load_dataset, run_experiment, DatasetSpec,
    ExperimentConfig, ExperimentMode, ModelChoice, TrajectoryWriter,
};
use dfm_core::rng;
use dfm_core::tensor::Tape;
use dfm_core::train::{
    build_model, evaluate, load_model, save_model, train, ModelKind, OptimizerState,
    TrainConfig, TrainLog,
};

#[derive(Parser)]
#[command(name = "dfm", version, about = "deep feedback model experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Dfm,
    Ff,
    DfmMasked,
}

impl ModelArg {
    fn choice(self) -> ModelChoice {
        match self {
            ModelArg::Dfm => ModelChoice::Dfm,
            ModelArg::Ff => ModelChoice::Ff,
            ModelArg::DfmMasked => ModelChoice::DfmMasked,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a JSON-configured experiment: sweeps, ablations, exports.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model on an IDX dataset directory and save a checkpoint.
    Train {
        /// Directory with train-images.idx / train-labels.idx / test-*.idx.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "dfm")]
        model: ModelArg,
        /// Additive input-noise level for training and evaluation.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Per-class training budget; omit to use the full training set.
        #[arg(long)]
        shots: Option<usize>,
        /// Feedback steps per forward pass.
        #[arg(long = "T", default_value_t = 5)]
        t_steps: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split, optionally corrupted.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `kind:severity`, e.g. pixelate:0.4.
        #[arg(long)]
        corruption: Option<String>,
        /// Additive (unclamped) input noise instead of a corruption.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-step state norms and class beliefs from a checkpoint.
    Traj {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and FLOP accounting for the standard model variants.
    Cost {
        /// IDX dataset directory; defaults to a synthetic stand-in.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long = "T", default_value_t = 5)]
        t_steps: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic glyph classification dataset as IDX files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        train_n: usize,
        #[arg(long, default_value_t = 128)]
        test_n: usize,
        /// Square image side in pixels (at least 16).
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config } => cmd_run(&config),
        Cmd::Train { dataset, model, sigma, shots, t_steps, tau, seed, epochs, out } => {
            cmd_train(&dataset, model, sigma, shots, t_steps, tau, seed, epochs, &out)
        }
        Cmd::Eval { checkpoint, dataset, corruption, sigma, seed } => {
            cmd_eval(&checkpoint, &dataset, corruption.as_deref(), sigma, seed)
        }
        Cmd::Traj { checkpoint, dataset, out, instances, seed } => {
            cmd_traj(&checkpoint, &dataset, &out, instances, seed)
        }
        Cmd::Cost { dataset, t_steps, out } => cmd_cost(dataset, t_steps, &out),
        Cmd::GenData { out, train_n, test_n, resolution, seed } => {
            cmd_gen_data(&out, train_n, test_n, resolution, seed)
        }
    }
}

fn cmd_run(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_json_file(config)
        .with_context(|| format!("loading {}", config.display()))?;
    let summary = run_experiment(&cfg)?;
    println!("wrote {} rows to {}", summary.rows, summary.results_path.display());
    for artifact in &summary.artifacts {
        println!("wrote {}", artifact.display());
    }
    Ok(())
}

fn load_idx_splits(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_dataset(&DatasetSpec::IdxDir { path: dir.to_path_buf() }, 0)
        .with_context(|| format!("loading dataset from {}", dir.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset: &Path,
    model_arg: ModelArg,
    sigma: f64,
    shots: Option<usize>,
    t_steps: usize,
    tau: f64,
    seed: u64,
    epochs: usize,
    out: &Path,
) -> Result<()> {
    if sigma > 0.0 && shots.is_some() {
        bail!("input noise and per-class subsampling are mutually exclusive; drop --sigma or --shots");
    }
    let (full_train, test) = load_idx_splits(dataset)?;
    let train_set = match shots {
        Some(d) => few_shot_sample(&full_train, d, seed)?,
        None => full_train,
    };
    let choice = model_arg.choice();
    let tc = TrainConfig {
        epochs,
        t_steps,
        tau,
        seed,
        mask_feedback: choice == ModelChoice::DfmMasked,
        ..TrainConfig::default()
    };
    let kind = match choice {
        ModelChoice::Ff => ModelKind::Feedforward,
        _ => ModelKind::Dfm,
    };
    let mc = default_model_config(&train_set, None)?;
    let mut model = build_model(kind, &mc, &tc)?;
    println!(
        "training {} ({} parameters) on {} instances, sigma {sigma}",
        model.name(),
        model.parameter_count(),
        train_set.len()
    );

    fs::create_dir_all(out)?;
    let mut log = TrainLog::create(&out.join("train_log.csv"))?;
    let mut opt = OptimizerState::new();
    let reports = train(&mut model, &train_set, &tc, &mut opt, sigma, Some(&mut log))?;
    for (i, r) in reports.iter().enumerate() {
        println!(
            "epoch {i}: loss {:.6} metric {:.4}{}",
            r.mean_loss,
            r.metric,
            match &r.diverged {
                Some(reason) => format!(" DIVERGED ({reason})"),
                None => String::new(),
            }
        );
    }

    let diverged = reports.last().is_some_and(|r| r.diverged.is_some());
    if !diverged {
        let ev = evaluate(&model, &test, sigma, tc.label_smoothing, seed)?;
        match ev.diverged {
            Some(reason) => println!("test: DIVERGED ({reason})"),
            None => println!("test: loss {:.6} metric {:.4}", ev.mean_loss, ev.metric),
        }
    }

    let ckpt = out.join("checkpoint.dfm");
    save_model(&model, &ckpt)?;
    println!("wrote {}", ckpt.display());
    println!("wrote {}", out.join("train_log.csv").display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    corruption: Option<&str>,
    sigma: f64,
    seed: u64,
) -> Result<()> {
    let model = load_model(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let (_, test) = load_idx_splits(dataset)?;
    let (test, label) = match corruption {
        Some(spec) => {
            let c = Corruption::parse(spec)?;
            (corrupted_dataset(&test, &c, seed)?, spec.to_string())
        }
        None => (test, "clean".to_string()),
    };
    let ev = evaluate(&model, &test, sigma, TrainConfig::default().label_smoothing, seed)?;
    match ev.diverged {
        Some(reason) => println!("{} on {label}: DIVERGED ({reason})", model.name()),
        None => println!(
            "{} on {label}: loss {:.6} metric {:.4} over {} instances",
            model.name(),
            ev.mean_loss,
            ev.metric,
            test.len()
        ),
    }
    Ok(())
}

fn cmd_traj(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    instances: usize,
    seed: u64,
) -> Result<()> {
    let model = load_model(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    if model.kind == ModelKind::Feedforward {
        bail!("a feedforward checkpoint has no internal trajectory to export");
    }
    let (_, test) = load_idx_splits(dataset)?;
    let n = instances.min(test.len());
    let mut writer = TrajectoryWriter::new(BufWriter::new(File::create(out)?), model.classes())?;
    let bindings = model.bind_frozen();
    let mut steps = 0;
    for i in 0..n {
        let state_seed = rng::derive_seed(seed, "traj", i as u64);
        let mut tape = Tape::new();
        let unrolled = model.predict(&mut tape, &bindings, &test.images[i], state_seed, true)?;
        steps += writer.record(model.name(), seed, i, &unrolled.trajectory)?.len();
    }
    writer.flush()?;
    println!("wrote {steps} steps across {n} instances to {}", out.display());
    Ok(())
}

fn cmd_cost(dataset: Option<PathBuf>, t_steps: usize, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig {
        mode: ExperimentMode::CostReport,
        dataset: match dataset {
            Some(path) => DatasetSpec::IdxDir { path },
            None => DatasetSpec::SyntheticCls { train_n: 8, test_n: 8, resolution: (16, 16) },
        },
        models: vec![ModelChoice::Dfm, ModelChoice::Ff, ModelChoice::DfmMasked],
        train: TrainConfig { t_steps, ..TrainConfig::default() },
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let summary = run_experiment(&cfg)?;
    for artifact in &summary.artifacts {
        print!("{}", fs::read_to_string(artifact)?);
        println!("wrote {}", artifact.display());
    }
    Ok(())
}

fn cmd_gen_data(out: &Path, train_n: usize, test_n: usize, resolution: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    for (split, n, images, labels) in [
        (Split::Train, train_n, "train-images.idx", "train-labels.idx"),
        (Split::Test, test_n, "test-images.idx", "test-labels.idx"),
    ] {
        let ds = make_synthetic_cls(n, resolution, resolution, seed, split)?;
        let (rows, cols, pixels, lbls) = dataset_to_idx(&ds)?;
        save_idx(&out.join(images), &out.join(labels), rows, cols, &pixels, &lbls)?;
        println!("wrote {} instances to {}/{images} + {labels}", ds.len(), out.display());
    }
    Ok(())
}

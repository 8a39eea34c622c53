//! Subcommand implementations behind the `plgdf` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use plgdf::data::{generate_phantom_dataset, read_volume, write_volume};
use plgdf::inference::predict_volume;
use plgdf::metrics::{aggregate, evaluate};
use plgdf::trainer::{load_checkpoint, resume_loop, train_loop, Checkpoint};
use plgdf::{
    DatasetManifest, MetricsRecord, MetricsSummary, Network, PhantomSpec, SlidingWindowSpec,
    TrainConfig, TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] plgdf::Error),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration and usage problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(plgdf::Error::Config(_) | plgdf::Error::InvalidArgument(_)) => 2,
            CliError::Core(plgdf::Error::Numerical(_) | plgdf::Error::NonFiniteVoxel { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "plgdf", version, about = "Semi-supervised volumetric segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and a log to the run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest's validation split.
    Eval(EvalArgs),
    /// Predict probability and label volumes for one image.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training volumes (labeled + unlabeled).
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 64)]
    pub shape: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Labeled volumes; defaults to 10% of `n` (at least one).
    #[arg(long)]
    pub labeled: Option<usize>,
    /// Extra held-out volumes.
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Preset name (`base`, `desk`) or path to a config file.
    #[arg(long, default_value = "base")]
    pub config: String,
    /// `key=value` override, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image header (`.hdr`) to segment.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for `prob.hdr` and `label.hdr`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves a preset name or config file, then applies overrides in order.
pub fn resolve_config(config: &str, sets: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let text = match TrainConfig::preset(config) {
        Some(p) => p.to_toml(),
        None => fs::read_to_string(config).map_err(|e| {
            CliError::Usage(format!("`{config}` is neither a preset nor a readable file: {e}"))
        })?,
    };
    let mut overrides = sets.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(TrainConfig::from_toml_with_overrides(&text, &overrides)?)
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<DatasetManifest> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if args.shape == 0 {
        return Err(CliError::Usage("--shape must be at least 1".into()));
    }
    if is_nonempty_dir(&args.out) && !args.force {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            args.out.display()
        )));
    }
    let spec = PhantomSpec {
        n_volumes: args.n,
        shape: [args.shape; 3],
        class_count: args.classes,
        noise_sigma: args.sigma,
        seed: args.seed,
        labeled_count: args.labeled.unwrap_or((args.n / 10).max(1)),
        validation_count: args.val,
    };
    Ok(generate_phantom_dataset(&spec, &args.out)?)
}

/// Everything needed to repeat a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub code_version: String,
    pub dataset_manifest: PathBuf,
    pub output_dir: PathBuf,
    pub resumed_from: Option<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub best_step: Option<u64>,
    pub best_val_dice: Option<f64>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = match &args.resume {
        Some(ckpt) => {
            if !args.sets.is_empty() || args.seed.is_some() {
                return Err(CliError::Usage("--set and --seed cannot be combined with --resume".into()));
            }
            load_checkpoint(ckpt)?.config
        }
        None => resolve_config(&args.config, &args.sets, args.seed)?,
    };
    let manifest = DatasetManifest::load(&args.manifest)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let snapshot = args.out.join(CONFIG_SNAPSHOT);
    fs::write(&snapshot, cfg.to_toml()).map_err(io_err(&snapshot))?;
    let mut run = RunManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        dataset_manifest: args.manifest.clone(),
        output_dir: args.out.clone(),
        resumed_from: args.resume.clone(),
        started_unix: unix_now(),
        finished_unix: None,
        best_step: None,
        best_val_dice: None,
    };
    let run_path = args.out.join(RUN_MANIFEST);
    write_json(&run_path, &run)?;
    let outcome = match &args.resume {
        Some(ckpt) => resume_loop(&manifest, ckpt, &args.out)?,
        None => train_loop(&manifest, &cfg, &args.out)?,
    };
    run.finished_unix = Some(unix_now());
    run.best_step = outcome.best_step;
    run.best_val_dice = outcome.best_val_dice;
    write_json(&run_path, &run)?;
    Ok(outcome)
}

fn network_for(ckpt: &Checkpoint) -> Result<Network> {
    let net = Network::new(ckpt.config.backbone(ckpt.class_count))?;
    net.check_params(&ckpt.state.ts.student)?;
    Ok(net)
}

fn window_for(ckpt: &Checkpoint) -> SlidingWindowSpec {
    ckpt.config.window()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub image: PathBuf,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub volumes: Vec<VolumeReport>,
    pub summary: MetricsSummary,
}

/// Sliding-window evaluation of the student on the validation split.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    if manifest.class_count != ckpt.class_count {
        return Err(plgdf::Error::Config(format!(
            "checkpoint predicts {} classes, manifest has {}",
            ckpt.class_count, manifest.class_count
        ))
        .into());
    }
    let net = network_for(&ckpt)?;
    let window = window_for(&ckpt);
    let mut volumes = Vec::new();
    for entry in manifest.validation_entries() {
        let img = plgdf::data::sampling::preprocess(read_volume(&entry.image)?, &ckpt.config)?;
        let gt = plgdf::data::sampling::preprocess(read_volume(&entry.label)?, &ckpt.config)?;
        let (_, pred) = predict_volume(&net, &ckpt.state.ts.student, &img, &window, ckpt.class_count)?;
        volumes.push(VolumeReport {
            image: entry.image.clone(),
            metrics: evaluate(&pred, &gt, img.spacing())?,
        });
    }
    let records: Vec<MetricsRecord> = volumes.iter().map(|v| v.metrics).collect();
    let report = EvalReport {
        checkpoint: args.checkpoint.clone(),
        step: ckpt.state.step,
        summary: aggregate(&records),
        volumes,
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

pub const PROB_FILE: &str = "prob.hdr";
pub const LABEL_FILE: &str = "label.hdr";

/// Writes `prob.hdr`/`label.hdr` (plus payloads) into the output directory.
pub fn cmd_predict(args: &PredictArgs) -> Result<(PathBuf, PathBuf)> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let net = network_for(&ckpt)?;
    let img = plgdf::data::sampling::preprocess(read_volume(&args.input)?, &ckpt.config)?;
    let (probs, labels) = predict_volume(&net, &ckpt.state.ts.student, &img, &window_for(&ckpt), ckpt.class_count)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let (p, l) = (args.out.join(PROB_FILE), args.out.join(LABEL_FILE));
    write_volume(&p, &probs)?;
    write_volume(&l, &labels)?;
    Ok((p, l))
}

/// Runs one parsed command and prints its result summary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let m = cmd_synth(&a)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} validation volumes to {}",
                m.labeled.len(),
                m.unlabeled.len(),
                m.validation.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let o = cmd_train(&a)?;
            println!(
                "best checkpoint {} (step {:?}, val dice {:?})",
                o.best_checkpoint.display(),
                o.best_step,
                o.best_val_dice
            );
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
        }
        Command::Predict(a) => {
            let (p, l) = cmd_predict(&a)?;
            println!("wrote {} and {}", p.display(), l.display());
        }
    }
    Ok(())
}

//! The mean-teacher training loop: one step per batch, EMA teacher update,
//! periodic validation with best-checkpoint selection, and resumable runs.

mod checkpoint;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use optim::{checked_grad_norm, learning_rate, sgd_step};

use crate::backbone::{Feature, ForwardCache, Network, ParamSet, TeacherStudentState};
use crate::config::TrainConfig;
use crate::data::{Batch, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::inference::predict_volume;
use crate::metrics::{aggregate, evaluate};
use crate::plgdf::{
    add_noise, make_pseudo_label, mix, sharpen, total_loss, LossInputs, LossReport, LossSettings,
    LossToggles, ProbMap, RampupSchedule,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::volume::Volume;

/// Everything that changes during training. Random draws are keyed by
/// `(seed, step)`, so no generator state needs to be stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub ts: TeacherStudentState<f32>,
    pub momentum: ParamSet<f32>,
    pub best_val_dice: Option<f64>,
    pub best_step: Option<u64>,
    /// `(step, validation Dice)` pairs in order.
    pub history: Vec<(u64, f64)>,
}

impl TrainState {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Result<Self> {
        let student = net.init_params::<f32>(derive_seed(cfg.seed, 0, Stream::Init));
        let momentum = student.zeros_like();
        Ok(Self {
            step: 0,
            ts: TeacherStudentState::new(student, cfg.ema_decay)?,
            momentum,
            best_val_dice: None,
            best_step: None,
            history: Vec::new(),
        })
    }
}

pub fn toggles(cfg: &TrainConfig) -> LossToggles {
    LossToggles {
        semi: cfg.enable_semi,
        mix: cfg.enable_mix,
        consis: cfg.enable_consis,
        sharp: cfg.enable_sharp,
    }
}

fn volume_feature(v: &Volume) -> Feature<f32> {
    Feature {
        channels: v.channels(),
        dims: v.dims(),
        data: v.values().to_vec(),
    }
}

fn prob_map(f: &Feature<f32>) -> ProbMap {
    ProbMap::new(f.channels, f.voxels(), f.data.iter().map(|&p| p as f64).collect())
        .expect("feature layout matches")
}

fn grad_feature(m: &ProbMap, like: &Feature<f32>) -> Feature<f32> {
    Feature {
        channels: like.channels,
        dims: like.dims,
        data: m.data().iter().map(|&g| g as f32).collect(),
    }
}

/// Concatenation of head `k` over a list of forward caches.
fn head_concat(caches: &[ForwardCache<f32>], k: usize) -> Result<ProbMap> {
    let maps: Vec<ProbMap> = caches.iter().map(|c| prob_map(c.probs(k))).collect();
    ProbMap::concat(&maps.iter().collect::<Vec<_>>())
}

fn backprop(
    net: &Network,
    params: &ParamSet<f32>,
    caches: &[ForwardCache<f32>],
    head_grads: &[ProbMap],
    grads: &mut ParamSet<f32>,
) -> Result<()> {
    if caches.is_empty() {
        return Ok(());
    }
    let sizes: Vec<usize> = caches.iter().map(|c| c.probs(0).voxels()).collect();
    let per_head: Vec<Vec<ProbMap>> = head_grads
        .iter()
        .map(|g| g.split(&sizes))
        .collect::<Result<_>>()?;
    for (i, cache) in caches.iter().enumerate() {
        let g = per_head
            .iter()
            .enumerate()
            .map(|(k, parts)| Some(grad_feature(&parts[i], cache.probs(k))))
            .collect();
        net.backward(params, cache, g, grads)?;
    }
    Ok(())
}

/// One training iteration on `batch`, updating `state` in place:
/// noisy teacher passes and pseudo labels, mixing, the student forward,
/// sharpened soft labels, the composite loss, an SGD step on the student
/// only, and the EMA teacher update.
pub fn train_step(net: &Network, state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossReport> {
    let t = state.step;
    let tg = toggles(cfg);
    let unsup = tg.any();
    let use_mix = tg.mix && (tg.semi || tg.consis);
    if batch.labeled_images.is_empty() || batch.labeled_images.len() != batch.labels.len() {
        return Err(Error::InvalidArgument("batch needs matching labeled images and labels".into()));
    }
    if unsup && batch.unlabeled_images.is_empty() {
        return Err(Error::Config("unsupervised terms are enabled but the batch has no unlabeled patches".into()));
    }
    let student = &state.ts.student;
    let unlabeled: &[Volume] = if unsup { &batch.unlabeled_images } else { &[] };

    let pseudo = if tg.semi {
        let mut r1 = stream_rng(cfg.seed, t, Stream::NoiseFirst);
        let mut r2 = stream_rng(cfg.seed, t, Stream::NoiseSecond);
        let mut labels = Vec::new();
        for u in unlabeled {
            let a = net.forward_top(&state.ts.teacher, &add_noise(u, cfg.noise_sigma, cfg.noise_clip, &mut r1)?)?;
            let b = net.forward_top(&state.ts.teacher, &add_noise(u, cfg.noise_sigma, cfg.noise_clip, &mut r2)?)?;
            labels.extend(make_pseudo_label(&ProbMap::from_volume(&a)?, &ProbMap::from_volume(&b)?)?);
        }
        Some(labels)
    } else {
        None
    };

    let mixed: Vec<Volume> = if use_mix {
        let mut rng = stream_rng(cfg.seed, t, Stream::Mix);
        unlabeled
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let l = &batch.labeled_images[i % batch.labeled_images.len()];
                Ok(mix(u, l, cfg.mix_alpha, &mut rng)?.0)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let heads_u = if tg.consis { cfg.scale_count } else { 1 };
    let fwd = |vs: &[Volume], heads: usize| -> Result<Vec<ForwardCache<f32>>> {
        vs.iter().map(|v| net.forward(student, &volume_feature(v), heads)).collect()
    };
    let lab_caches = fwd(&batch.labeled_images, 1)?;
    let u_caches = fwd(unlabeled, heads_u)?;
    let m_caches = fwd(&mixed, heads_u)?;

    let labeled = head_concat(&lab_caches, 0)?;
    let gt: Vec<u8> = batch.labels.iter().flat_map(|l| l.labels()).collect();
    let heads_of = |caches: &[ForwardCache<f32>]| -> Result<Vec<ProbMap>> {
        if caches.is_empty() {
            return Ok(Vec::new());
        }
        (0..heads_u).map(|k| head_concat(caches, k)).collect()
    };
    let u_heads = heads_of(&u_caches)?;
    let m_heads = heads_of(&m_caches)?;
    let soft = if tg.sharp {
        Some(sharpen(&u_heads[0], cfg.sharpen_t)?)
    } else {
        None
    };

    let ramp = RampupSchedule::new(cfg.consis_w, t, cfg.t_max);
    let settings = LossSettings {
        toggles: tg,
        dice_eps: cfg.dice_eps,
        consis: cfg.consis_options(),
        lambda: ramp.weight(),
        semi_weight: if cfg.semi_rampup { ramp.unit() } else { 1.0 },
    };
    let inputs = LossInputs {
        labeled: &labeled,
        gt: &gt,
        unlabeled: &u_heads,
        mixed: &m_heads,
        pseudo: pseudo.as_deref(),
        soft: soft.as_ref(),
    };
    let (report, loss_grads) = total_loss(&inputs, &settings)
        .map_err(|e| Error::Numerical(format!("step {t}: {e}")))?;

    let mut grads = student.zeros_like();
    backprop(net, student, &lab_caches, std::slice::from_ref(&loss_grads.labeled), &mut grads)?;
    backprop(net, student, &u_caches, &loss_grads.unlabeled, &mut grads)?;
    backprop(net, student, &m_caches, &loss_grads.mixed, &mut grads)?;
    checked_grad_norm(&grads).map_err(|e| Error::Numerical(format!("step {t}: {e} (losses {report:?})")))?;

    let lr = learning_rate(cfg.lr, cfg.lr_schedule, t, cfg.t_max);
    sgd_step(&mut state.ts.student, &grads, &mut state.momentum, lr, cfg.momentum, cfg.weight_decay)?;
    state.ts.ema_update()?;
    state.step += 1;
    Ok(report)
}

/// Mean foreground Dice of the student over the validation split.
pub fn validate(net: &Network, params: &ParamSet<f32>, dataset: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let records = dataset
        .validation
        .iter()
        .map(|(img, lab)| {
            let (_, pred) = predict_volume(net, params, img, &cfg.window(), dataset.class_count)?;
            evaluate(&pred, lab, img.spacing())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&records).mean.dice.unwrap_or(0.0))
}

/// Step with the highest score; the earliest wins ties.
pub fn select_best(history: &[(u64, f64)]) -> Result<u64> {
    let mut best: Option<(u64, f64)> = None;
    for &(step, score) in history {
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((step, score));
        }
    }
    best.map(|(s, _)| s)
        .ok_or_else(|| Error::InvalidArgument("no validation history".into()))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_step: Option<u64>,
    pub best_val_dice: Option<f64>,
    pub history: Vec<(u64, f64)>,
    pub steps_run: u64,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    dataset: Dataset,
    state: TrainState,
}

impl Trainer {
    pub fn new(dataset: Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg.backbone(dataset.class_count))?;
        let state = TrainState::new(&net, &cfg)?;
        Ok(Self {
            net,
            cfg,
            dataset,
            state,
        })
    }

    pub fn from_checkpoint(dataset: Dataset, ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        if ckpt.class_count != dataset.class_count {
            return Err(Error::Config(format!(
                "checkpoint has {} classes, dataset has {}",
                ckpt.class_count, dataset.class_count
            )));
        }
        let net = Network::new(ckpt.config.backbone(ckpt.class_count))?;
        net.check_params(&ckpt.state.ts.student)?;
        net.check_params(&ckpt.state.ts.teacher)?;
        net.check_params(&ckpt.state.momentum)?;
        Ok(Self {
            net,
            cfg: ckpt.config,
            dataset,
            state: ckpt.state,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            class_count: self.dataset.class_count,
            state: self.state.clone(),
        }
    }

    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.dataset.assemble_batch(&self.cfg, self.cfg.seed, self.state.step)?;
        train_step(&self.net, &mut self.state, &batch, &self.cfg)
    }

    pub fn validate(&self) -> Result<f64> {
        validate(&self.net, &self.state.ts.student, &self.dataset, &self.cfg)
    }

    /// Trains until `t_max` (or `stop_at`, if earlier), validating every
    /// `validation_interval` steps and at the final step. Writes
    /// `best.ckpt`, `last.ckpt` and an appended JSON-lines log to `run_dir`.
    pub fn run(&mut self, run_dir: &Path, stop_at: Option<u64>) -> Result<TrainOutcome> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let probe = run_dir.join(".write_probe");
        fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
        fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;
        let log_path = run_dir.join(TRAIN_LOG);
        let mut log_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let best_path = run_dir.join(BEST_CHECKPOINT);
        let last_path = run_dir.join(LAST_CHECKPOINT);

        let end = stop_at.unwrap_or(self.cfg.t_max).min(self.cfg.t_max);
        let start_step = self.state.step;
        let started = Instant::now();
        while self.state.step < end {
            let lr = learning_rate(self.cfg.lr, self.cfg.lr_schedule, self.state.step, self.cfg.t_max);
            let losses = self.step()?;
            let step = self.state.step;
            let mut record = LogRecord {
                step,
                lr,
                losses,
                val_dice: None,
            };
            let validate_now = step % self.cfg.validation_interval == 0 || step == self.cfg.t_max;
            if validate_now {
                let dice = self.validate()?;
                record.val_dice = Some(dice);
                self.state.history.push((step, dice));
                if self.state.best_val_dice.map_or(true, |b| dice > b) {
                    self.state.best_val_dice = Some(dice);
                    self.state.best_step = Some(step);
                    save_checkpoint(&best_path, &self.checkpoint())?;
                }
                save_checkpoint(&last_path, &self.checkpoint())?;
                log::info!(
                    "step {step}/{} val dice {dice:.4} (best {:.4} at {:?}), {:.1}s",
                    self.cfg.t_max,
                    self.state.best_val_dice.unwrap_or(0.0),
                    self.state.best_step,
                    started.elapsed().as_secs_f64()
                );
            }
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::format(&log_path, e.to_string()))?;
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        if self.state.history.last().map(|h| h.0) != Some(self.state.step) {
            save_checkpoint(&last_path, &self.checkpoint())?;
        }
        Ok(TrainOutcome {
            best_checkpoint: best_path,
            last_checkpoint: last_path,
            best_step: self.state.best_step,
            best_val_dice: self.state.best_val_dice,
            history: self.state.history.clone(),
            steps_run: self.state.step - start_step,
        })
    }
}

/// Loads the data, trains from scratch and returns the checkpoint paths.
pub fn train_loop(manifest: &DatasetManifest, cfg: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::load(manifest, cfg)?;
    Trainer::new(dataset, cfg.clone())?.run(run_dir, None)
}

/// Continues a run from a saved checkpoint.
pub fn resume_loop(manifest: &DatasetManifest, checkpoint: &Path, run_dir: &Path) -> Result<TrainOutcome> {
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(manifest, &ckpt.config)?;
    Trainer::from_checkpoint(dataset, ckpt)?.run(run_dir, None)
}

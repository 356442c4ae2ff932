//! Pretraining: view batches, the two-phase schedule, training modes, metric
//! logging and checkpoints.

mod checkpoint;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::data::{write_text, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{Bound, ForwardCtx, GcrlModel, ModelConfig};
use crate::quantizer::{Codebook, TokenGrid};
use crate::rng::{self, Purpose};
use crate::tensor::{
    adamw_step, clip_global_norm, global_norm, lr_at, AdamWConfig, GradMap, LrSchedule, OptimState, Tape,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Generative loss on the weak view, NT-Xent between weak and strong
    /// views after the generative-only first phase.
    Gcrl,
    GenerativeOnly,
    /// NT-Xent between two strong views; the decoder is never used.
    ContrastiveOnly,
    /// Like `Gcrl` with the contrastive term replaced by cross-entropy of a
    /// linear head on the encoder representation.
    SupervisedHybrid,
    /// Cross-entropy of the linear head only.
    SupervisedContrastiveReplaced,
}

impl TrainMode {
    /// Modes whose first phase trains the generative term alone.
    pub fn is_two_phase(self) -> bool {
        matches!(self, TrainMode::Gcrl | TrainMode::SupervisedHybrid)
    }

    pub fn is_supervised(self) -> bool {
        matches!(
            self,
            TrainMode::SupervisedHybrid | TrainMode::SupervisedContrastiveReplaced
        )
    }

    fn has_generative(self) -> bool {
        matches!(
            self,
            TrainMode::Gcrl | TrainMode::GenerativeOnly | TrainMode::SupervisedHybrid
        )
    }
}

/// Peak learning rates and warmup. Phase 2 of a two-phase run restarts its
/// own warmup + cosine schedule at `phase2_peak_rate` (defaults to
/// `peak_rate`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_rate: f64,
    #[serde(default)]
    pub phase2_peak_rate: Option<f64>,
    pub warmup_epochs: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            peak_rate: 1e-3,
            phase2_peak_rate: None,
            warmup_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub epochs: u32,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub codebook: Option<PathBuf>,
    pub phase1_fraction: f64,
    pub weak_aug: AugPolicy,
    pub strong_aug: AugPolicy,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Gcrl,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            epochs: 10,
            batch_size: 32,
            schedule: ScheduleConfig::default(),
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            dataset: DatasetSpec::default(),
            codebook: None,
            phase1_fraction: 0.5,
            weak_aug: AugPolicy::weak(),
            strong_aug: AugPolicy::strong(),
            checkpoint_every: 0,
        }
    }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.{field}"), message),
        other => other,
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.weak_aug.validate().map_err(|e| prefixed("weak_aug", e))?;
        self.strong_aug.validate().map_err(|e| prefixed("strong_aug", e))?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return Err(Error::config("phase1_fraction", "must lie in [0, 1]"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.schedule.peak_rate > 0.0) {
            return Err(Error::config("schedule.peak_rate", "must be positive"));
        }
        if let Some(r) = self.schedule.phase2_peak_rate {
            if !(r > 0.0) {
                return Err(Error::config("schedule.phase2_peak_rate", "must be positive"));
            }
        }
        if self.mode.is_supervised() && self.model.n_classes == 0 {
            return Err(Error::config(
                "model.n_classes",
                "supervised modes need a classification head",
            ));
        }
        if self.mode.has_generative() && self.model.n_dec_blocks == 0 {
            return Err(Error::config(
                "model.n_dec_blocks",
                "generative modes need decoder blocks",
            ));
        }
        if self.mode.has_generative() && self.model.seq_len() < 2 {
            return Err(Error::config(
                "model.height",
                "generative modes need at least two tokens",
            ));
        }
        Ok(())
    }

    /// Number of epochs in the generative-only first phase,
    /// `ceil(phase1_fraction * epochs)`; zero for single-phase modes.
    pub fn phase1_epochs(&self) -> u32 {
        if self.mode.is_two_phase() {
            (self.phase1_fraction * self.epochs as f64).ceil() as u32
        } else {
            0
        }
    }

    /// Objective phase of `epoch`: 1 trains the generative term alone, 2
    /// includes the contrastive or supervised term.
    pub fn phase_of(&self, epoch: u32) -> u8 {
        match self.mode {
            TrainMode::GenerativeOnly => 1,
            TrainMode::ContrastiveOnly | TrainMode::SupervisedContrastiveReplaced => 2,
            _ if epoch < self.phase1_epochs() => 1,
            _ => 2,
        }
    }

    /// Learning rate for optimizer step `global_step` (0-based).
    pub fn lr_for_step(&self, steps_per_epoch: u32, global_step: u64) -> Result<f64> {
        let spe = steps_per_epoch;
        let peak1 = self.schedule.peak_rate;
        let single = |total_epochs, peak_rate| LrSchedule {
            peak_rate,
            warmup_epochs: self.schedule.warmup_epochs,
            total_epochs,
            steps_per_epoch: spe,
        };
        if !self.mode.is_two_phase() {
            return lr_at(global_step, &single(self.epochs, peak1));
        }
        let p1 = self.phase1_epochs();
        let boundary = p1 as u64 * spe as u64;
        if global_step < boundary {
            lr_at(global_step, &single(p1, peak1))
        } else {
            let peak2 = self.schedule.phase2_peak_rate.unwrap_or(peak1);
            lr_at(global_step - boundary, &single(self.epochs - p1, peak2))
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Token views of one batch. Index `i` of every stream comes from the same
/// source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    /// Weak views; in contrastive-only mode a second strong view instead.
    pub weak_tokens: Vec<TokenGrid>,
    pub strong_tokens: Vec<TokenGrid>,
    pub labels: Option<Vec<usize>>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.weak_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weak_tokens.is_empty()
    }
}

/// Augments and encodes `indices` of `dataset`. The augmentation stream of
/// each sample is keyed by `(seed, epoch, index)`.
pub fn make_batch(
    dataset: &Dataset,
    codebook: &Codebook,
    indices: &[usize],
    epoch: u32,
    cfg: &TrainConfig,
) -> Result<ViewBatch> {
    let mut weak = Vec::with_capacity(indices.len());
    let mut strong = Vec::with_capacity(indices.len());
    for &i in indices {
        let image = dataset
            .images
            .get(i)
            .ok_or_else(|| Error::invalid(format!("batch index {i} outside dataset of {}", dataset.len())))?;
        let key = u32::try_from(i).map_err(|_| Error::invalid("dataset index exceeds u32"))?;
        let (policy, purpose) = match cfg.mode {
            TrainMode::ContrastiveOnly => (&cfg.strong_aug, Purpose::SecondStrongAug),
            _ => (&cfg.weak_aug, Purpose::WeakAug),
        };
        let w = policy.apply(image, &mut rng::stream(cfg.seed, purpose, epoch, key))?;
        let s = cfg
            .strong_aug
            .apply(image, &mut rng::stream(cfg.seed, Purpose::StrongAug, epoch, key))?;
        weak.push(codebook.encode(&w)?);
        strong.push(codebook.encode(&s)?);
    }
    let labels = dataset.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
    Ok(ViewBatch {
        weak_tokens: weak,
        strong_tokens: strong,
        labels,
    })
}

/// Where a step sits in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPosition {
    pub epoch: u32,
    pub batch_index: u32,
    pub global_step: u64,
    pub steps_per_epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u32,
    pub phase: u8,
    pub loss: f64,
    pub gen_loss: Option<f64>,
    /// Contrastive term, or the cross-entropy term in the supervised modes.
    pub con_loss: Option<f64>,
    pub grad_norm_before_clip: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,phase,loss,gen_loss,con_loss,grad_norm,lr";

impl StepMetrics {
    /// One CSV row; skipped loss terms are empty fields and `grad_norm` is the
    /// post-clip norm.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.phase,
            self.loss,
            opt(self.gen_loss),
            opt(self.con_loss),
            self.grad_norm,
            self.lr
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// One optimizer step on `batch`.
pub fn train_step(
    model: &mut GcrlModel,
    optim: &mut OptimState,
    batch: &ViewBatch,
    cfg: &TrainConfig,
    pos: StepPosition,
) -> Result<StepMetrics> {
    if batch.is_empty() || batch.strong_tokens.len() != batch.len() {
        return Err(Error::invalid("malformed view batch"));
    }
    let phase = cfg.phase_of(pos.epoch);
    let lr = cfg.lr_for_step(pos.steps_per_epoch, pos.global_step)?;
    let mode = cfg.mode;

    let mut tape = Tape::<f32>::new();
    let b = Bound::new(&mut tape, model, true);
    let mut drop_rng = rng::stream(cfg.seed, Purpose::Dropout, pos.epoch, pos.batch_index);
    let mut ctx = ForwardCtx::train(&mut drop_rng);
    let weak: Vec<&TokenGrid> = batch.weak_tokens.iter().collect();

    let h = model.encoder_hidden(&mut tape, &b, &weak, &mut ctx)?;
    let gen = if mode.has_generative() {
        let logits = model.logits_from_hidden(&mut tape, &b, h, &mut ctx)?;
        Some(losses::generative_nll(&mut tape, logits, &weak)?)
    } else {
        None
    };
    let aux = match (mode, phase) {
        (TrainMode::Gcrl | TrainMode::ContrastiveOnly, 2) => {
            let strong: Vec<&TokenGrid> = batch.strong_tokens.iter().collect();
            let r1 = model.pool(&mut tape, &b, h, "enc_ln")?;
            let z1 = model.project(&mut tape, &b, r1)?;
            let r2 = model.representation(&mut tape, &b, &strong, &mut ctx)?;
            let z2 = model.project(&mut tape, &b, r2)?;
            Some(losses::nt_xent(&mut tape, z1, z2, cfg.weights.temperature)?)
        }
        (TrainMode::SupervisedHybrid | TrainMode::SupervisedContrastiveReplaced, 2) => {
            let labels = batch
                .labels
                .as_ref()
                .ok_or_else(|| Error::invalid("supervised mode needs labels"))?;
            let r = model.pool(&mut tape, &b, h, "enc_ln")?;
            let logits = model.class_logits(&mut tape, &b, r)?;
            Some(losses::cross_entropy(&mut tape, logits, labels)?)
        }
        _ => None,
    };
    let loss = losses::hybrid(&mut tape, gen, aux, &cfg.weights)?;
    let value = |v| tape.value(v).item() as f64;
    let (loss_v, gen_v, aux_v) = (value(loss), gen.map(value), aux.map(value));
    if !loss_v.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {} (epoch {}): total {loss_v}, generative {gen_v:?}, auxiliary {aux_v:?}",
            pos.global_step, pos.epoch
        )));
    }

    let mut grads_all = tape.backward(loss)?;
    let mut grads = GradMap::new();
    for (name, var) in b.iter() {
        if let Some(g) = grads_all.take(var) {
            grads.insert(name.to_string(), g);
        }
    }
    let before = global_norm(&grads)?;
    clip_global_norm(&mut grads, cfg.grad_clip)?;
    let after = global_norm(&grads)?;
    adamw_step(&mut model.params, &grads, optim, &cfg.adamw(), lr)?;

    Ok(StepMetrics {
        step: pos.global_step,
        epoch: pos.epoch,
        phase,
        loss: loss_v,
        gen_loss: gen_v,
        con_loss: aux_v,
        grad_norm_before_clip: before,
        grad_norm: after,
        lr,
    })
}

/// Counts of the first raster token over the unaugmented training set; the
/// sampler draws position 1 from this marginal.
pub fn first_token_counts(dataset: &Dataset, codebook: &Codebook) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; codebook.k()];
    for im in &dataset.images {
        let g = codebook.encode(im)?;
        counts[g.tokens[0] as usize] += 1;
    }
    Ok(counts)
}

/// Options of [`run_training`] beyond the config.
#[derive(Debug, Default)]
pub struct RunOptions {
    /// Directory for `metrics.csv`, periodic checkpoints and `final.gckp`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (simulates an interruption).
    pub stop_after_epoch: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Steps run by this invocation.
    pub log: Vec<StepMetrics>,
}

/// Checks that the dataset and codebook fit the config.
pub fn check_inputs(cfg: &TrainConfig, dataset: &Dataset, codebook: &Codebook) -> Result<()> {
    if codebook.k() != cfg.model.vocab {
        return Err(Error::config(
            "model.vocab",
            format!(
                "codebook has {} colors, model expects {}",
                codebook.k(),
                cfg.model.vocab
            ),
        ));
    }
    if let Some((h, w)) = dataset.image_size() {
        if (h, w) != (cfg.model.height, cfg.model.width) {
            return Err(Error::config(
                "model.height",
                format!(
                    "dataset images are {h}x{w}, model expects {}x{}",
                    cfg.model.height, cfg.model.width
                ),
            ));
        }
    }
    if cfg.epochs > 0 && dataset.len() < cfg.batch_size {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the dataset size {}", cfg.batch_size, dataset.len()),
        ));
    }
    if cfg.mode.is_supervised() {
        let labels = dataset
            .labels
            .as_ref()
            .ok_or_else(|| Error::config("dataset", "supervised modes need labels"))?;
        if let Some(&l) = labels.iter().find(|&&l| l >= cfg.model.n_classes) {
            return Err(Error::config(
                "model.n_classes",
                format!("label {l} outside {} classes", cfg.model.n_classes),
            ));
        }
    }
    Ok(())
}

pub fn shuffled_indices(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch, 0));
    idx
}

fn checkpoint_path(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.gckp"))
}

/// Full training run: seeded shuffling, drop-last batches, per-step logging,
/// periodic and final checkpoints.
pub fn run_training(
    cfg: &TrainConfig,
    dataset: &Dataset,
    codebook: &Codebook,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_inputs(cfg, dataset, codebook)?;
    let mut state = match opts.resume {
        Some(ck) => {
            ck.check_compatible(&cfg.model)?;
            Checkpoint {
                config: cfg.clone(),
                ..ck
            }
        }
        None => {
            let model = GcrlModel::init(cfg.model.clone(), cfg.seed)?;
            let optim = OptimState::new(model.decay_mask());
            Checkpoint {
                config: cfg.clone(),
                model,
                optim,
                epoch: 0,
                step: 0,
                first_token_counts: first_token_counts(dataset, codebook)?,
            }
        }
    };
    let spe = (dataset.len() / cfg.batch_size) as u32;
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.csv"));
    let mut previous_rows = String::new();
    if let (Some(path), true) = (&metrics_path, state.step > 0) {
        if let Ok(text) = std::fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < state.step) {
                    previous_rows.push_str(line);
                    previous_rows.push('\n');
                }
            }
        }
    }
    let last_epoch = opts.stop_after_epoch.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    let mut log = Vec::new();
    let flush = |log: &[StepMetrics]| -> Result<()> {
        if let Some(path) = &metrics_path {
            let csv = metrics_csv(log);
            let (header, body) = csv.split_once('\n').expect("header line");
            write_text(path, &format!("{header}\n{previous_rows}{body}"))?;
        }
        Ok(())
    };
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let order = shuffled_indices(dataset.len(), cfg.seed, epoch);
        for (j, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch = make_batch(dataset, codebook, chunk, epoch, cfg)?;
            let pos = StepPosition {
                epoch,
                batch_index: j as u32,
                global_step: state.step,
                steps_per_epoch: spe,
            };
            log.push(train_step(&mut state.model, &mut state.optim, &batch, cfg, pos)?);
            state.step += 1;
        }
        state.epoch += 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                flush(&log)?;
                save_checkpoint(&checkpoint_path(dir, state.epoch), &state)?;
            }
        }
    }
    flush(&log)?;
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join("final.gckp"), &state)?;
    }
    Ok(TrainOutcome { checkpoint: state, log })
}

#[cfg(test)]
mod tests;

//! Optimiser, augmentation, datasets, the two-stage schedule and checkpoints.

mod adam;
mod augment;
mod checkpoint;
mod data;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use augment::{augment, AugmentConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    Checkpoint, CheckpointMeta, MAGIC, VERSION,
};
pub use data::{load_dataset, save_dataset, synthetic_dataset, Sample};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tape};
use crate::error::{Error, Result};
use crate::losses::{hybrid, matting, LossTerms, MattingWeights, SsimConfig};
use crate::metrics::{score_pair, MetricsConfig, MetricsReport};
use crate::model::{forward, predict_resized, PsuNet};
use crate::tensor::Tensor;

/// Stage-two learning rate as a fraction of stage one.
pub const STAGE2_LR_FACTOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Saliency training with the hybrid loss.
    One,
    /// Matting-style fine-tuning with L1 + edge loss.
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Stop once the mean loss of the last `window` steps fails to improve on the
/// window before it by at least `min_improvement` (relative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauRule {
    pub window: usize,
    pub min_improvement: f64,
}

impl Default for PlateauRule {
    fn default() -> Self {
        PlateauRule {
            window: 200,
            min_improvement: 0.01,
        }
    }
}

impl PlateauRule {
    pub fn reached(&self, losses: &[f64]) -> bool {
        let w = self.window;
        if w == 0 || losses.len() < 2 * w {
            return false;
        }
        let n = losses.len();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let recent = mean(&losses[n - w..]);
        let before = mean(&losses[n - 2 * w..n - w]);
        recent > before * (1.0 - self.min_improvement)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_stage1: f64,
    /// Defaults to `STAGE2_LR_FACTOR * lr_stage1`.
    pub lr_stage2: Option<f64>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub max_steps: usize,
    pub plateau: Option<PlateauRule>,
    pub seed: u64,
    pub loss_terms: LossTerms,
    pub ssim: SsimConfig,
    pub matting: MattingWeights,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Start stage two with fresh Adam moments instead of continuing.
    pub reset_adam_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 16,
            lr_stage1: 1e-3,
            lr_stage2: None,
            betas: adam.betas,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            augment: AugmentConfig::default(),
            max_steps: 10_000,
            plateau: None,
            seed: 0,
            loss_terms: LossTerms::default(),
            ssim: SsimConfig::default(),
            matting: MattingWeights::default(),
            checkpoint_every: 0,
            reset_adam_stage2: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_for(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.lr_stage1,
            Stage::Two => self.lr_stage2.unwrap_or(STAGE2_LR_FACTOR * self.lr_stage1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for stage in [Stage::One, Stage::Two] {
            let lr = self.lr_for(stage);
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "stage {} learning rate must be positive, got {lr}",
                    u8::from(stage)
                )));
            }
        }
        if self.loss_terms.is_empty() {
            return Err(Error::Config(
                "at least one stage-one loss term must be enabled".into(),
            ));
        }
        self.adam().validate()?;
        self.augment.validate()?;
        self.ssim.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint: Option<&'a Path>,
    /// JSON-lines log, appended to.
    pub log: Option<&'a Path>,
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(u8::from(stage)));
    rng
}

fn write_checkpoint(
    path: &Path,
    model: &PsuNet,
    adam: &AdamState,
    stage: Stage,
    cfg: &TrainConfig,
    history: &[StepRecord],
) -> Result<()> {
    const TAIL: usize = 32;
    let tail = history[history.len().saturating_sub(TAIL)..]
        .iter()
        .map(|r| r.loss)
        .collect();
    let ckpt = Checkpoint {
        model: model.clone(),
        adam: Some(adam.clone()),
        meta: CheckpointMeta {
            stage: stage.into(),
            step: adam.step,
            seed: cfg.seed,
            loss_tail: tail,
        },
    };
    save_checkpoint(&ckpt, path)
}

/// Loss value and parameter gradients for one batch.
/// Total loss, named components, and per-parameter gradients.
pub type LossAndGrads = (f64, BTreeMap<String, f64>, BTreeMap<String, Vec<f32>>);

pub fn loss_and_grads(
    model: &PsuNet,
    images: Tensor<f32>,
    labels: Tensor<f32>,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<LossAndGrads> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(images);
    let target = tape.constant(labels);
    let pred = forward(&mut tape, model.config(), &bound, &x)?;
    let parts = match stage {
        Stage::One => hybrid(&mut tape, &pred, &target, cfg.loss_terms, &cfg.ssim)?,
        Stage::Two => matting(&mut tape, &pred, &target, cfg.matting)?,
    };
    let value = |v| -> Result<f64> { Ok(f64::from(tape.value(v)?.data()[0])) };
    let loss = value(&parts.total)?;
    let components = parts
        .components
        .iter()
        .map(|(k, v)| Ok((k.to_string(), value(v)?)))
        .collect::<Result<_>>()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    tape.backward(&parts.total)?;
    let grads = bound
        .iter()
        .map(|(name, var)| {
            let g = tape
                .grad(var)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.params()[name].numel()]);
            (name.clone(), g)
        })
        .collect();
    Ok((loss, components, grads))
}

/// Runs one training stage in place and returns its per-step history.
///
/// On a non-finite loss or gradient the run stops with an error; the model
/// keeps its last good parameters and any checkpoint already written stays.
pub fn train_stage(
    model: &mut PsuNet,
    adam: &mut AdamState,
    data: &[Sample],
    stage: Stage,
    cfg: &TrainConfig,
    outputs: TrainOutputs<'_>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let crop = cfg.augment.crop_to;
    model.config().check_input_size(crop, crop)?;
    if stage == Stage::Two && cfg.reset_adam_stage2 {
        *adam = AdamState::new(model.params());
    }
    adam.check_matches(model.params())?;

    let mut log: Option<File> = match outputs.log {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let lr = cfg.lr_for(stage);
    let adam_cfg = cfg.adam();
    let mut rng = stage_rng(cfg.seed, stage);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.max_steps);

    for step in 1..=cfg.max_steps as u64 {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let s = &data[order.pop().expect("refilled")];
            let (img, lab) = augment(&s.image, &s.label, &cfg.augment, &mut rng)?;
            images.push(img);
            labels.push(lab);
        }
        let (loss, components, grads) = loss_and_grads(
            model,
            Tensor::concat_batch(&images)?,
            Tensor::concat_batch(&labels)?,
            stage,
            cfg,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("stage {} step {step}: {msg}", u8::from(stage)))
            }
            other => other,
        })?;
        adam_step(model.params_mut(), &grads, adam, &adam_cfg, lr)?;

        let record = StepRecord {
            step,
            stage: stage.into(),
            loss,
            components,
            lr,
        };
        if let (Some(f), Some(p)) = (log.as_mut(), outputs.log) {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        history.push(record);

        if let Some(path) = outputs.checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                write_checkpoint(path, model, adam, stage, cfg, &history)?;
            }
        }
        if let Some(rule) = cfg.plateau {
            let losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
            if rule.reached(&losses) {
                break;
            }
        }
    }
    if let Some(path) = outputs.checkpoint {
        write_checkpoint(path, model, adam, stage, cfg, &history)?;
    }
    Ok(history)
}

/// Scores the model on `data`, running inference at `size x size` and
/// resizing predictions back to each label's size.
pub fn evaluate_samples(
    model: &PsuNet,
    data: &[Sample],
    size: usize,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let mut records = Vec::with_capacity(data.len());
    let mut errors = Vec::new();
    for s in data {
        let pred = predict_resized(model, &s.image, size)?;
        match score_pair(&s.name, &pred, &s.label, cfg) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(format!("{}: {e}", s.name)),
        }
    }
    Ok(MetricsReport::from_records(records, errors, cfg.thresholds))
}

//! The fine-tuning engine: freeze policies, the perturbed-prompt
//! training loop, combined loss, and checkpoint selection.
//!
//! Each step draws a fresh prompt perturbation (seeded by run seed and
//! step index), so re-running with the same seed reproduces the exact
//! sequence of perturbed boxes. Training itself is a single logical
//! sequence; only validation evaluation fans out, and its aggregation is
//! order-independent.

pub mod loss;

pub use loss::{training_loss, training_loss_with_grad, LossWeights};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    prepare_sample, DatasetManifest, FewShotSpec, PreparedSample, DEFAULT_MASK_THRESHOLD,
};
use crate::error::{DataError, TrainError};
use crate::geometry::{extract_bbox, Dimensions, PerturbationPolicy};
use crate::parallel::ExecMode;
use crate::segmenter::{GroupId, Model, TrainItem, TrainSettings};
use crate::sweep::{evaluate_at_level, EvalOptions, EvalSet};

/// Trainable/frozen flags for the three segmenter components. The
/// default follows the strongest transfer-learning setting: tune both
/// encoders, keep the mask decoder frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePolicy {
    pub image_encoder_trainable: bool,
    pub prompt_encoder_trainable: bool,
    pub mask_decoder_trainable: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            image_encoder_trainable: true,
            prompt_encoder_trainable: true,
            mask_decoder_trainable: false,
        }
    }
}

impl FreezePolicy {
    pub fn all_trainable() -> Self {
        Self {
            image_encoder_trainable: true,
            prompt_encoder_trainable: true,
            mask_decoder_trainable: true,
        }
    }

    pub fn trainable(&self, group: GroupId) -> bool {
        match group {
            GroupId::ImageEncoder => self.image_encoder_trainable,
            GroupId::PromptEncoder => self.prompt_encoder_trainable,
            GroupId::MaskDecoder => self.mask_decoder_trainable,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.image_encoder_trainable
            && !self.prompt_encoder_trainable
            && !self.mask_decoder_trainable
        {
            return Err(TrainError::AllFrozen);
        }
        Ok(())
    }

    /// Short tag for labels and file names, e.g. `ie+pe` when both
    /// encoders train and the decoder is frozen.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.image_encoder_trainable {
            parts.push("ie");
        }
        if self.prompt_encoder_trainable {
            parts.push("pe");
        }
        if self.mask_decoder_trainable {
            parts.push("md");
        }
        parts.join("+")
    }
}

/// Full training recipe. Serialized as a flat TOML/JSON document;
/// unknown keys are rejected.
///
/// The effective few-shot draw mixes `fewshot.seed` with `run_seed`, so
/// multi-run experiments re-draw their k-shot sample per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub fewshot: FewShotSpec,
    pub freeze: FreezePolicy,
    pub train_perturbation: PerturbationPolicy,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub input_resolution: u32,
    pub loss_weights: LossWeights,
    /// Fixed perturbation (pixels) applied to validation prompts when
    /// scoring checkpoints.
    pub selection_perturbation: u32,
    pub run_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fewshot: FewShotSpec::full(0),
            freeze: FreezePolicy::default(),
            train_perturbation: PerturbationPolicy::Variable { max_pixels: 50 },
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 1,
            input_resolution: 1024,
            loss_weights: LossWeights::default(),
            selection_perturbation: 30,
            run_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig {
                field: "learning_rate",
                reason: format!("must be positive, got {}", self.learning_rate),
            });
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(TrainError::InvalidConfig {
                field: "weight_decay",
                reason: format!("must be nonnegative, got {}", self.weight_decay),
            });
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig {
                field: "epochs",
                reason: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig {
                field: "batch_size",
                reason: "must be at least 1".into(),
            });
        }
        if self.input_resolution == 0 {
            return Err(TrainError::InvalidConfig {
                field: "input_resolution",
                reason: "must be positive".into(),
            });
        }
        self.freeze.validate()
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            loss_weights: self.loss_weights,
            freeze: self.freeze,
        }
    }

    /// Seed of the k-shot draw for this run.
    pub fn effective_fewshot_seed(&self) -> u64 {
        mix_seed(self.fewshot.seed, self.run_seed)
    }
}

/// Deterministic seed derivation (splitmix64 over the combined words).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_dice: f64,
    pub is_best: bool,
}

/// Per-epoch loss and validation DICE, plus which epoch won.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn best_val_dice(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_dice)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with columns `epoch,mean_loss,val_dice,is_best`.
    pub fn write_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        let mut writer = csv::Writer::from_path(path)?;
        for record in &self.epochs {
            writer.serialize(record)?;
        }
        writer.flush()
    }

    pub fn read_csv(path: &Path) -> Result<Self, csv::Error> {
        let mut reader = csv::Reader::from_path(path)?;
        let epochs = reader.deserialize().collect::<Result<Vec<_>, _>>()?;
        Ok(Self { epochs })
    }
}

/// Result of a training run: the model passed in is left holding the
/// best checkpoint's weights.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

enum SampleStore<'a> {
    Preloaded(Vec<PreparedSample>),
    Lazy {
        manifest: &'a DatasetManifest,
        target: Dimensions,
        norm: crate::data::Normalization,
    },
}

impl SampleStore<'_> {
    fn get(&self, index: usize) -> Result<PreparedSample, DataError> {
        match self {
            SampleStore::Preloaded(samples) => Ok(samples[index].clone()),
            SampleStore::Lazy {
                manifest,
                target,
                norm,
            } => prepare_sample(
                &manifest.records()[index],
                *target,
                DEFAULT_MASK_THRESHOLD,
                norm,
            ),
        }
    }
}

// Keep whole training sets in memory only while they stay small.
const PRELOAD_BUDGET_BYTES: usize = 1 << 30;

/// Fine-tune `model` on `train_set`, selecting the checkpoint by
/// validation DICE under a fixed prompt perturbation of
/// `config.selection_perturbation` pixels. On return the model holds the
/// best epoch's weights.
///
/// Samples whose ground-truth mask is empty carry no box prompt and are
/// skipped. Gradients average over `batch_size` samples per optimizer
/// step; the per-step perturbation RNG is seeded from `(run_seed, step)`.
pub fn train(
    model: &mut Model,
    train_set: &DatasetManifest,
    validation_set: &DatasetManifest,
    config: &RunConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.begin_training(&config.train_settings())?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if validation_set.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    if model.input_resolution() != config.input_resolution {
        return Err(TrainError::InvalidConfig {
            field: "input_resolution",
            reason: format!(
                "config says {} but the model expects {}",
                config.input_resolution,
                model.input_resolution()
            ),
        });
    }

    let target = Dimensions::square(config.input_resolution);
    let norm = model.normalization();
    let bytes_per_sample = 4 * target.pixel_count() * 8;
    let store = if train_set.len() * bytes_per_sample <= PRELOAD_BUDGET_BYTES {
        let samples = train_set
            .records()
            .iter()
            .map(|r| prepare_sample(r, target, DEFAULT_MASK_THRESHOLD, &norm))
            .collect::<Result<Vec<_>, _>>()?;
        SampleStore::Preloaded(samples)
    } else {
        SampleStore::Lazy {
            manifest: train_set,
            target,
            norm,
        }
    };

    let validation = EvalSet::load(
        validation_set,
        model.input_resolution(),
        &norm,
        &EvalOptions::default(),
    )
    .map_err(Box::new)?;

    let mut log = TrainingLog::default();
    let mut best: Option<(usize, f64, crate::segmenter::ModelWeights)> = None;
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        // Deterministic per-epoch shuffle, on a stream disjoint from the
        // per-step perturbation seeds.
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(mix_seed(
            config.run_seed,
            (1 << 60) | epoch as u64,
        ));
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut owned: Vec<(PreparedSample, crate::geometry::BoundingBox)> = Vec::new();
            let mut prompt_rng = ChaCha20Rng::seed_from_u64(mix_seed(config.run_seed, step));
            for &index in chunk {
                let sample = store.get(index)?;
                let bbox = match extract_bbox(&sample.mask) {
                    Ok(b) => b,
                    Err(crate::error::GeometryError::EmptyMask) => continue,
                    Err(e) => return Err(e.into()),
                };
                let prompt = config
                    .train_perturbation
                    .apply(bbox, target, &mut prompt_rng);
                owned.push((sample, prompt));
            }
            if owned.is_empty() {
                continue;
            }
            let items: Vec<TrainItem<'_>> = owned
                .iter()
                .map(|(sample, prompt)| TrainItem {
                    image: &sample.image,
                    prompt: *prompt,
                    gt: &sample.mask,
                })
                .collect();
            let loss = model.train_step_batch(&items, config.loss_weights)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: step as usize,
                });
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            return Err(TrainError::EmptyTrainSet);
        }

        let val_dice = evaluate_at_level(
            model,
            &validation,
            config.selection_perturbation,
            ExecMode::Parallel,
        )
        .map_err(Box::new)?
        .value();

        let is_best = best.as_ref().is_none_or(|(_, dice, _)| val_dice > *dice);
        if is_best {
            best = Some((epoch, val_dice, model.export_weights()?));
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            val_dice,
            is_best,
        });
    }

    let (best_epoch, best_val_dice, weights) = best.expect("at least one epoch ran");
    model.import_weights(&weights)?;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_dice,
    })
}

//! Robustness sweeps: fixed-perturbation evaluation over test sets,
//! multi-run aggregation, and the experiment grids behind the standard
//! report kinds.
//!
//! Evaluation fans out across samples with read-only model weights; the
//! per-sample scores are reduced with a commutative aggregate, so worker
//! count never changes a curve.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    load_mask_original, prepare_sample, restore_to_original, sample_fewshot, DatasetManifest,
    ImageTensor, Normalization, ShotCount, DEFAULT_MASK_THRESHOLD, DEFAULT_RESTORE_THRESHOLD,
};
use crate::error::SweepError;
use crate::finetune::{self, mix_seed, RunConfig, TrainingLog};
use crate::geometry::{
    extract_bbox, perturb_fixed, rescale_bbox, BinaryMask, BoundingBox, Dimensions,
    PerturbationPolicy,
};
use crate::metrics::{aggregate_runs, dice, CurvePoint, DiceScore};
use crate::parallel::{map_indexed, ExecMode};
use crate::segmenter::{build_model, Model, SegmenterSpec};

/// Which levels to sweep, on which test sets, over which run seeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Fixed perturbation levels in pixels, strictly increasing.
    pub levels: Vec<u32>,
    pub test_sets: Vec<String>,
    /// Run seeds; each seed is an independent fine-tuning run.
    pub runs: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            levels: (0..=100).step_by(5).collect(),
            test_sets: Vec::new(),
            runs: vec![0, 1, 2, 3, 4],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SweepError::UnknownKind(
                "sweep levels must be nonempty and strictly increasing".into(),
            ));
        }
        if self.runs.is_empty() {
            return Err(SweepError::UnknownKind("sweep needs at least one run".into()));
        }
        Ok(())
    }
}

/// DICE-vs-perturbation curve of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub model_id: String,
    pub test_set: String,
    pub points: Vec<CurvePoint>,
}

impl RobustnessCurve {
    pub fn mean_at(&self, level: u32) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.perturbation_level == level)
            .map(|p| p.mean_dice)
    }
}

/// Thresholds used while preparing and scoring samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mask_threshold: f64,
    pub restore_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            restore_threshold: DEFAULT_RESTORE_THRESHOLD,
        }
    }
}

/// One test sample, fully prepared for repeated evaluation: the image at
/// model resolution, the tight ground-truth box already rescaled to
/// model coordinates, and the original-resolution ground truth that
/// scoring compares against.
pub struct EvalEntry {
    pub sample_id: String,
    pub image: ImageTensor,
    pub model_box: BoundingBox,
    pub gt_original: BinaryMask,
    pub original_size: Dimensions,
}

/// A test set prepared once and evaluated at many levels.
pub struct EvalSet {
    name: String,
    restore_threshold: f64,
    entries: Vec<EvalEntry>,
}

impl EvalSet {
    pub fn load(
        manifest: &DatasetManifest,
        model_resolution: u32,
        norm: &Normalization,
        options: &EvalOptions,
    ) -> Result<Self, SweepError> {
        if manifest.is_empty() {
            return Err(SweepError::EmptyTestSet(manifest.name().to_string()));
        }
        let target = Dimensions::square(model_resolution);
        let mut entries = Vec::with_capacity(manifest.len());
        for record in manifest.records() {
            let prepared = prepare_sample(record, target, options.mask_threshold, norm)?;
            let gt_original = load_mask_original(record, options.mask_threshold)?;
            // The prompt derives from the original-resolution ground
            // truth, exactly as an annotator would draw it, then moves
            // into model coordinates.
            let original_box = extract_bbox(&gt_original)?;
            let model_box = rescale_bbox(original_box, record.original_dimensions(), target)?;
            entries.push(EvalEntry {
                sample_id: record.sample_id.clone(),
                image: prepared.image,
                model_box,
                gt_original,
                original_size: record.original_dimensions(),
            });
        }
        Ok(Self {
            name: manifest.name().to_string(),
            restore_threshold: options.restore_threshold,
            entries,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reverse the sample order; scores must not depend on it.
    pub fn reversed(mut self) -> Self {
        self.entries.reverse();
        self
    }
}

/// Mean DICE over a test set with every prompt enlarged by a fixed `p`
/// pixels (at model resolution). Deterministic for frozen weights.
pub fn evaluate_at_level(
    model: &Model,
    set: &EvalSet,
    p: u32,
    exec: ExecMode,
) -> Result<DiceScore, SweepError> {
    if set.is_empty() {
        return Err(SweepError::EmptyTestSet(set.name.clone()));
    }
    let model_dims = Dimensions::square(model.input_resolution());
    let scores = map_indexed(exec, set.entries.len(), |i| -> Result<f64, SweepError> {
        let entry = &set.entries[i];
        let prompt = perturb_fixed(entry.model_box, p, model_dims);
        let probs = model.predict(&entry.image, &prompt)?;
        let predicted = restore_to_original(&probs, entry.original_size, set.restore_threshold);
        Ok(dice(&entry.gt_original, &predicted)?.value())
    });
    let mut sum = 0.0;
    for score in &scores {
        match score {
            Ok(value) => sum += value,
            Err(_) => {
                // Propagate the first error; rebuild it since SweepError
                // is not Clone.
                return Err(scores
                    .into_iter()
                    .find_map(Result::err)
                    .expect("an error was observed"));
            }
        }
    }
    Ok(DiceScore::new(sum / set.entries.len() as f64))
}

/// Whether a sweep fine-tunes per run or scores the starting weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    ZeroShot,
    FineTune,
}

/// Everything a sweep needs besides the spec itself.
pub struct SweepInputs<'a> {
    pub train_pool: Option<&'a DatasetManifest>,
    pub validation: Option<&'a DatasetManifest>,
    pub test_sets: &'a [&'a DatasetManifest],
}

/// Outcome of one sweep: aggregated curves plus each run's training
/// artifacts (empty in zero-shot mode).
pub struct SweepOutcome {
    pub curves: Vec<RobustnessCurve>,
    pub training_logs: Vec<(u64, TrainingLog)>,
    /// The last trained model (holding its best checkpoint), if any.
    pub final_model: Option<Model>,
}

/// Fine-tune (or reuse) a model per run seed, evaluate at every level on
/// every test set, and aggregate across runs.
pub fn run_sweep(
    sweep: &SweepSpec,
    base_spec: &SegmenterSpec,
    base_config: &RunConfig,
    mode: SweepMode,
    inputs: &SweepInputs<'_>,
    model_id: &str,
    exec: ExecMode,
) -> Result<SweepOutcome, SweepError> {
    sweep.validate()?;
    // per_set_per_run[s][r] = mean dice per level
    let mut per_set_scores: Vec<Vec<Vec<DiceScore>>> =
        vec![vec![Vec::new(); sweep.runs.len()]; inputs.test_sets.len()];
    let mut training_logs = Vec::new();
    let mut final_model = None;

    // Zero-shot evaluation is deterministic in the starting weights, so
    // one evaluation serves every run seed.
    let effective_runs = match mode {
        SweepMode::ZeroShot => 1,
        SweepMode::FineTune => sweep.runs.len(),
    };

    #[allow(clippy::needless_range_loop)]
    for run_index in 0..effective_runs {
        let run_seed = sweep.runs[run_index];
        let model = match mode {
            SweepMode::ZeroShot => build_model(base_spec)?,
            SweepMode::FineTune => {
                let train_pool = inputs.train_pool.ok_or_else(|| {
                    SweepError::UnknownKind("fine-tune sweep needs a training pool".into())
                })?;
                let validation = inputs.validation.ok_or_else(|| {
                    SweepError::UnknownKind("fine-tune sweep needs a validation set".into())
                })?;
                let mut config = base_config.clone();
                config.run_seed = run_seed;
                let mut fewshot = config.fewshot;
                fewshot.seed = config.effective_fewshot_seed();
                let train_set = sample_fewshot(train_pool, &fewshot)?;

                let mut spec = base_spec.clone();
                spec.init_seed = mix_seed(base_spec.init_seed, run_seed);
                let mut model = build_model(&spec)?;
                let outcome = finetune::train(&mut model, &train_set, validation, &config)
                    .map_err(|source| SweepError::Train {
                        seed: run_seed,
                        source: Box::new(source),
                    })?;
                training_logs.push((run_seed, outcome.log));
                model
            }
        };

        let norm = model.normalization();
        for (set_index, manifest) in inputs.test_sets.iter().enumerate() {
            let eval_set = EvalSet::load(
                manifest,
                model.input_resolution(),
                &norm,
                &EvalOptions::default(),
            )?;
            for &level in &sweep.levels {
                let score = evaluate_at_level(&model, &eval_set, level, exec)?;
                per_set_scores[set_index][run_index].push(score);
            }
        }
        final_model = Some(model);
    }

    // Replicate the single zero-shot evaluation across run slots so that
    // curve shape (run_count) is identical in both modes.
    if matches!(mode, SweepMode::ZeroShot) {
        for set_scores in &mut per_set_scores {
            let first = set_scores[0].clone();
            for run_slot in set_scores.iter_mut().skip(1) {
                *run_slot = first.clone();
            }
        }
    }

    let mut curves = Vec::with_capacity(inputs.test_sets.len());
    for (set_index, manifest) in inputs.test_sets.iter().enumerate() {
        let mut points = Vec::with_capacity(sweep.levels.len());
        for (level_index, &level) in sweep.levels.iter().enumerate() {
            let per_run: Vec<DiceScore> = per_set_scores[set_index]
                .iter()
                .map(|scores| scores[level_index])
                .collect();
            points.push(aggregate_runs(level, &per_run)?);
        }
        curves.push(RobustnessCurve {
            model_id: model_id.to_string(),
            test_set: manifest.name().to_string(),
            points,
        });
    }
    Ok(SweepOutcome {
        curves,
        training_logs,
        final_model,
    })
}

/// The experiment grids behind the standard report kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    FreezeAblation,
    TrainPerturbationAblation,
    FewshotCurve,
    Generalization,
    ScaleComparison,
    SotaComparison,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::FreezeAblation,
        ExperimentKind::TrainPerturbationAblation,
        ExperimentKind::FewshotCurve,
        ExperimentKind::Generalization,
        ExperimentKind::ScaleComparison,
        ExperimentKind::SotaComparison,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::FreezeAblation => "freeze-ablation",
            ExperimentKind::TrainPerturbationAblation => "train-perturbation-ablation",
            ExperimentKind::FewshotCurve => "fewshot-curve",
            ExperimentKind::Generalization => "generalization",
            ExperimentKind::ScaleComparison => "scale-comparison",
            ExperimentKind::SotaComparison => "sota-comparison",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = SweepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| SweepError::UnknownKind(s.to_string()))
    }
}

/// One cell of an experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    /// Series label, e.g. `k=50` or `freeze=ie+pe`.
    pub label: String,
    pub config: RunConfig,
    pub sweep: SweepSpec,
    pub mode: SweepMode,
    /// Encoder scale override (scale-comparison only).
    pub variant: Option<String>,
}

fn entry(label: impl Into<String>, config: RunConfig, sweep: SweepSpec, mode: SweepMode) -> MatrixEntry {
    MatrixEntry {
        label: label.into(),
        config,
        sweep,
        mode,
        variant: None,
    }
}

/// The four transfer-learning freeze settings, in report order: tune
/// everything; freeze only the mask decoder; freeze only the image
/// encoder; freeze both image encoder and mask decoder.
pub fn freeze_ablation_policies() -> [crate::finetune::FreezePolicy; 4] {
    use crate::finetune::FreezePolicy;
    [
        FreezePolicy::all_trainable(),
        FreezePolicy {
            image_encoder_trainable: true,
            prompt_encoder_trainable: true,
            mask_decoder_trainable: false,
        },
        FreezePolicy {
            image_encoder_trainable: false,
            prompt_encoder_trainable: true,
            mask_decoder_trainable: true,
        },
        FreezePolicy {
            image_encoder_trainable: false,
            prompt_encoder_trainable: true,
            mask_decoder_trainable: false,
        },
    ]
}

/// Expand a report kind into its exact config grid, starting from the
/// caller's base run config and sweep (datasets, resolution, seeds).
pub fn experiment_matrix(
    kind: ExperimentKind,
    base_config: &RunConfig,
    base_sweep: &SweepSpec,
) -> Vec<MatrixEntry> {
    match kind {
        ExperimentKind::FreezeAblation => freeze_ablation_policies()
            .into_iter()
            .map(|policy| {
                let mut config = base_config.clone();
                config.freeze = policy;
                entry(
                    format!("freeze={}", policy.tag()),
                    config,
                    base_sweep.clone(),
                    SweepMode::FineTune,
                )
            })
            .collect(),
        ExperimentKind::TrainPerturbationAblation => {
            let mut entries = Vec::new();
            for policy in [
                PerturbationPolicy::None,
                PerturbationPolicy::Fixed { pixels: 10 },
                PerturbationPolicy::Fixed { pixels: 20 },
                PerturbationPolicy::Fixed { pixels: 30 },
                PerturbationPolicy::Fixed { pixels: 40 },
                PerturbationPolicy::Fixed { pixels: 50 },
                PerturbationPolicy::Variable { max_pixels: 50 },
            ] {
                let mut config = base_config.clone();
                config.train_perturbation = policy;
                let label = match policy {
                    PerturbationPolicy::None => "train-perturb=0".to_string(),
                    PerturbationPolicy::Fixed { pixels } => format!("train-perturb={pixels}"),
                    PerturbationPolicy::Variable { max_pixels } => {
                        format!("train-perturb=variable(0..{max_pixels})")
                    }
                };
                entries.push(entry(label, config, base_sweep.clone(), SweepMode::FineTune));
            }
            entries
        }
        ExperimentKind::FewshotCurve | ExperimentKind::Generalization => {
            let mut entries = vec![entry(
                "zero-shot",
                base_config.clone(),
                base_sweep.clone(),
                SweepMode::ZeroShot,
            )];
            for k in crate::data::SUPPORTED_SHOT_COUNTS {
                let mut config = base_config.clone();
                config.fewshot.k = ShotCount::Shots(k);
                entries.push(entry(
                    format!("k={k}"),
                    config,
                    base_sweep.clone(),
                    SweepMode::FineTune,
                ));
            }
            let mut config = base_config.clone();
            config.fewshot.k = ShotCount::Full;
            entries.push(entry(
                "k=full",
                config,
                base_sweep.clone(),
                SweepMode::FineTune,
            ));
            entries
        }
        ExperimentKind::ScaleComparison => {
            let mut entries = Vec::new();
            for variant in ["B", "L"] {
                for (label, mode) in [("zero-shot", SweepMode::ZeroShot), ("full", SweepMode::FineTune)]
                {
                    let mut config = base_config.clone();
                    config.fewshot.k = ShotCount::Full;
                    let mut e = entry(
                        format!("{variant}-{label}"),
                        config,
                        base_sweep.clone(),
                        mode,
                    );
                    e.variant = Some(variant.to_string());
                    entries.push(e);
                }
            }
            entries
        }
        ExperimentKind::SotaComparison => {
            let mut sweep = base_sweep.clone();
            sweep.levels = vec![25, 50];
            [1usize, 5, 10]
                .into_iter()
                .map(|k| {
                    let mut config = base_config.clone();
                    config.fewshot.k = ShotCount::Shots(k);
                    entry(format!("k={k}"), config, sweep.clone(), SweepMode::FineTune)
                })
                .collect()
        }
    }
}

/// Flat CSV row of a curve point.
#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    model_id: String,
    test_set: String,
    level_px: u32,
    mean_dice: String,
    std_dice: String,
    run_count: usize,
}

/// Write curves as CSV with columns
/// `model_id,test_set,level_px,mean_dice,std_dice,run_count`.
/// Scores are decimal percentages with two fractional digits.
pub fn write_curves_csv(curves: &[RobustnessCurve], path: &Path) -> Result<(), SweepError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    for curve in curves {
        for point in &curve.points {
            writer
                .serialize(CurveRow {
                    model_id: curve.model_id.clone(),
                    test_set: curve.test_set.clone(),
                    level_px: point.perturbation_level,
                    mean_dice: format!("{:.2}", point.mean_dice),
                    std_dice: format!("{:.2}", point.std_dice),
                    run_count: point.run_count,
                })
                .map_err(|e| io_error(path, e))?;
        }
    }
    writer.flush().map_err(|source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<RobustnessCurve>, SweepError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let mut curves: Vec<RobustnessCurve> = Vec::new();
    for row in reader.deserialize::<CurveRow>() {
        let row = row.map_err(|e| io_error(path, e))?;
        let point = CurvePoint {
            perturbation_level: row.level_px,
            mean_dice: row.mean_dice.parse().unwrap_or(f64::NAN),
            std_dice: row.std_dice.parse().unwrap_or(f64::NAN),
            run_count: row.run_count,
        };
        match curves
            .iter_mut()
            .find(|c| c.model_id == row.model_id && c.test_set == row.test_set)
        {
            Some(curve) => curve.points.push(point),
            None => curves.push(RobustnessCurve {
                model_id: row.model_id,
                test_set: row.test_set,
                points: vec![point],
            }),
        }
    }
    Ok(curves)
}

fn io_error(path: &Path, e: csv::Error) -> SweepError {
    SweepError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

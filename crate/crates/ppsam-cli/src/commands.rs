//! Implementations behind the CLI subcommands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use ppsam_core::data::{
    carve_validation, load_manifest, sample_fewshot, write_manifest_cache, DatasetManifest,
    FewShotSpec, ShotCount, SplitFile, DEFAULT_MASK_THRESHOLD,
};
use ppsam_core::finetune;
use ppsam_core::geometry::extract_bbox as tight_bbox;
use ppsam_core::parallel::ExecMode;
use ppsam_core::segmenter::{build_model, Checkpoint};
use ppsam_core::sweep::{
    experiment_matrix, run_sweep, write_curves_csv, ExperimentKind, RobustnessCurve, SweepInputs,
    SweepMode,
};
use ppsam_core::synthetic::{self, ShapeDatasetSpec};

use crate::config::{ExperimentConfig, SelectionMode};
use crate::index::{self, Artifacts, ExperimentRecord};
use crate::report::{self, LabeledCurve};
use crate::CliError;

fn data_error(e: ppsam_core::DataError) -> CliError {
    CliError::Data {
        message: e.to_string(),
    }
}

/// Extract a tight box from every ground-truth mask of a dataset.
/// Writes `<dataset>.boxes.jsonl` plus a `<dataset>.rejects.jsonl`
/// sidecar listing samples with empty masks.
pub fn extract_bbox(data_root: &Path, dataset: &str, out_dir: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(data_root, dataset).map_err(data_error)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let mut boxes = Vec::new();
    let mut rejects = Vec::new();
    for record in manifest.records() {
        let mask = ppsam_core::data::load_mask_original(record, DEFAULT_MASK_THRESHOLD)
            .map_err(data_error)?;
        match tight_bbox(&mask) {
            Ok(bbox) => boxes.push(json!({"sample_id": record.sample_id, "bbox": bbox})),
            Err(ppsam_core::GeometryError::EmptyMask) => {
                rejects.push(json!({"sample_id": record.sample_id, "reason": "empty mask"}));
            }
            Err(e) => {
                return Err(CliError::Data {
                    message: format!("{}: {e}", record.sample_id),
                })
            }
        }
    }

    let write_jsonl = |path: &Path, lines: &[serde_json::Value]| -> Result<(), CliError> {
        let mut buffer = Vec::new();
        for line in lines {
            serde_json::to_writer(&mut buffer, line).expect("json line");
            buffer.push(b'\n');
        }
        fs::write(path, buffer).map_err(|e| CliError::io(path, e))
    };
    let boxes_path = out_dir.join(format!("{dataset}.boxes.jsonl"));
    let rejects_path = out_dir.join(format!("{dataset}.rejects.jsonl"));
    write_jsonl(&boxes_path, &boxes)?;
    write_jsonl(&rejects_path, &rejects)?;
    println!(
        "{}: {} boxes, {} rejects -> {}",
        dataset,
        boxes.len(),
        rejects.len(),
        boxes_path.display()
    );
    Ok(())
}

/// Draw a k-shot sample and write it as a manifest cache.
pub fn sample_fewshot_cmd(
    data_root: &Path,
    dataset: &str,
    k: &str,
    seed: u64,
    split_file: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let manifest = load_manifest(data_root, dataset).map_err(data_error)?;
    let pool = match split_file {
        Some(path) => {
            let split = SplitFile::load(path).map_err(data_error)?;
            ppsam_core::data::split_train_test(&manifest, &split)
                .map_err(data_error)?
                .0
        }
        None => manifest,
    };
    let spec = FewShotSpec {
        k: ShotCount::parse(k).map_err(data_error)?,
        seed,
    };
    let sampled = sample_fewshot(&pool, &spec).map_err(data_error)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    write_manifest_cache(&sampled, out).map_err(data_error)?;
    println!("{}: sampled {} records -> {}", dataset, sampled.len(), out.display());
    Ok(())
}

struct ResolvedData {
    pool: DatasetManifest,
    validation: DatasetManifest,
    test_split: Option<DatasetManifest>,
}

/// Build the training pool and the checkpoint-selection set according to
/// the config's selection mode.
fn resolve_training_data(
    config: &ExperimentConfig,
    data_root: &Path,
) -> Result<ResolvedData, CliError> {
    let root = config.data.root.as_deref().unwrap_or(data_root);
    let manifest = load_manifest(root, config.train_dataset()?).map_err(data_error)?;
    let (train_side, test_side) = match &config.data.split_file {
        Some(path) => {
            // Relative split paths resolve against the working directory
            // first, then the data root.
            let path = if path.is_absolute() || path.exists() {
                path.clone()
            } else {
                root.join(path.file_name().unwrap_or(path.as_os_str()))
            };
            let split = SplitFile::load(&path).map_err(data_error)?;
            let (train, test) =
                ppsam_core::data::split_train_test(&manifest, &split).map_err(data_error)?;
            (train, Some(test))
        }
        None => (manifest, None),
    };
    match config.data.selection {
        SelectionMode::CarvedValidation => {
            let (validation, pool) = carve_validation(
                &train_side,
                config.data.validation_fraction,
                config.data.validation_seed,
            )
            .map_err(data_error)?;
            Ok(ResolvedData {
                pool,
                validation,
                test_split: test_side,
            })
        }
        SelectionMode::TestSet => {
            let validation = test_side.clone().ok_or_else(|| CliError::Config {
                message: "selection = \"test-set\" requires data.split_file".into(),
            })?;
            Ok(ResolvedData {
                pool: train_side,
                validation,
                test_split: test_side,
            })
        }
    }
}

fn experiment_dir(out_root: &Path, experiment_id: &str) -> PathBuf {
    out_root.join(experiment_id)
}

fn reuse_or_clean(
    out_root: &Path,
    experiment_id: &str,
    fingerprint: &str,
    force: bool,
) -> Result<bool, CliError> {
    if let Some(existing) = index::find(out_root, experiment_id)? {
        if !force && existing.config_fingerprint == fingerprint && existing.artifacts_present() {
            println!(
                "{experiment_id}: unchanged config (fingerprint {}), reusing artifacts; \
                 pass --force to re-run",
                &fingerprint[..12]
            );
            return Ok(true);
        }
    }
    Ok(false)
}

fn write_resolved_config(dir: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
    let path = dir.join("resolved_config.json");
    let payload = serde_json::to_vec_pretty(config).expect("config serialization");
    fs::write(&path, payload).map_err(|e| CliError::io(&path, e))
}

/// Fine-tune one model from a config file, writing the checkpoint and
/// training log, and registering the experiment.
pub fn finetune_cmd(
    config_path: &Path,
    data_root: &Path,
    out_root: &Path,
    force: bool,
) -> Result<String, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let fingerprint = config.fingerprint();
    let experiment_id = config
        .experiment_id
        .clone()
        .unwrap_or_else(|| format!("ft-{}", &fingerprint[..12]));
    if reuse_or_clean(out_root, &experiment_id, &fingerprint, force)? {
        return Ok(experiment_id);
    }

    let resolved = resolve_training_data(&config, data_root)?;
    let mut fewshot = config.run.fewshot;
    fewshot.seed = config.run.effective_fewshot_seed();
    let train_set = sample_fewshot(&resolved.pool, &fewshot).map_err(data_error)?;

    let spec = config.segmenter_spec().clone();
    let mut model = build_model(&spec).map_err(|e| CliError::Runtime {
        message: e.to_string(),
    })?;
    let outcome = finetune::train(&mut model, &train_set, &resolved.validation, &config.run)
        .map_err(CliError::from_train)?;

    let dir = experiment_dir(out_root, &experiment_id);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let checkpoint_path = dir.join("checkpoint.json");
    Checkpoint {
        spec: spec.clone(),
        freeze: config.run.freeze,
        config_fingerprint: fingerprint.clone(),
        weights: model.export_weights().map_err(|e| CliError::Runtime {
            message: e.to_string(),
        })?,
    }
    .save(&checkpoint_path)
    .map_err(|e| CliError::Runtime {
        message: e.to_string(),
    })?;
    let log_path = dir.join("train_log.csv");
    outcome
        .log
        .write_csv(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    write_resolved_config(&dir, &config)?;

    index::append(
        out_root,
        &ExperimentRecord {
            experiment_id: experiment_id.clone(),
            config_fingerprint: fingerprint,
            command: "finetune".into(),
            artifacts: Artifacts {
                checkpoint: Some(checkpoint_path),
                log: Some(log_path),
                curves: None,
            },
            created_at: index::timestamp(),
        },
    )?;
    println!(
        "{experiment_id}: best epoch {} (validation DICE {:.2})",
        outcome.best_epoch, outcome.best_val_dice
    );
    Ok(experiment_id)
}

fn load_test_sets(
    config: &ExperimentConfig,
    data_root: &Path,
    test_split: Option<&DatasetManifest>,
) -> Result<Vec<DatasetManifest>, CliError> {
    let root = config.data.root.as_deref().unwrap_or(data_root);
    let mut sets = Vec::new();
    for name in &config.sweep.test_sets {
        // The reserved name `train-split-test` refers to the held-out
        // side of data.split_file.
        if name == "train-split-test" {
            let split = test_split.ok_or_else(|| CliError::Config {
                message: "test set `train-split-test` requires data.split_file".into(),
            })?;
            sets.push(split.clone());
        } else {
            sets.push(load_manifest(root, name).map_err(data_error)?);
        }
    }
    if sets.is_empty() {
        return Err(CliError::Config {
            message: "sweep.test_sets must name at least one dataset".into(),
        });
    }
    Ok(sets)
}

/// Run a robustness sweep (single config, or a whole experiment grid
/// when `sweep.kind` is set), writing curves and registering the
/// experiment.
pub fn sweep_cmd(
    config_path: &Path,
    data_root: &Path,
    out_root: &Path,
    force: bool,
) -> Result<String, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let fingerprint = config.fingerprint();
    let experiment_id = config
        .experiment_id
        .clone()
        .unwrap_or_else(|| format!("sw-{}", &fingerprint[..12]));
    if reuse_or_clean(out_root, &experiment_id, &fingerprint, force)? {
        return Ok(experiment_id);
    }

    let (resolved, test_split) = if config.data.train_dataset.is_some() {
        let resolved = resolve_training_data(&config, data_root)?;
        let split = resolved.test_split.clone();
        (Some(resolved), split)
    } else {
        (None, None)
    };
    let test_sets = load_test_sets(&config, data_root, test_split.as_ref())?;
    let test_refs: Vec<&DatasetManifest> = test_sets.iter().collect();

    let inputs = SweepInputs {
        train_pool: resolved.as_ref().map(|r| &r.pool),
        validation: resolved.as_ref().map(|r| &r.validation),
        test_sets: &test_refs,
    };

    let dir = experiment_dir(out_root, &experiment_id);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let mut curves: Vec<RobustnessCurve> = Vec::new();
    match config.sweep.kind {
        None => {
            let outcome = run_sweep(
                &config.sweep.spec(),
                config.segmenter_spec(),
                &config.run,
                config.sweep.mode,
                &inputs,
                &model_label(&config),
                ExecMode::Parallel,
            )
            .map_err(CliError::from_sweep)?;
            save_training_logs(&dir, "run", &outcome.training_logs)?;
            curves.extend(outcome.curves);
        }
        Some(kind) => {
            for entry in experiment_matrix(kind, &config.run, &config.sweep.spec()) {
                let mut spec = config.segmenter_spec().clone();
                if let Some(variant) = &entry.variant {
                    spec.variant = variant.clone();
                }
                let outcome = run_sweep(
                    &entry.sweep,
                    &spec,
                    &entry.config,
                    entry.mode,
                    &inputs,
                    &entry.label,
                    ExecMode::Parallel,
                )
                .map_err(CliError::from_sweep)?;
                save_training_logs(&dir, &entry.label, &outcome.training_logs)?;
                curves.extend(outcome.curves);
                println!("{experiment_id}: finished series `{}`", entry.label);
            }
        }
    }

    let curves_path = dir.join("curves.csv");
    write_curves_csv(&curves, &curves_path).map_err(CliError::from_sweep)?;
    write_resolved_config(&dir, &config)?;
    index::append(
        out_root,
        &ExperimentRecord {
            experiment_id: experiment_id.clone(),
            config_fingerprint: fingerprint,
            command: "sweep".into(),
            artifacts: Artifacts {
                checkpoint: None,
                log: None,
                curves: Some(curves_path.clone()),
            },
            created_at: index::timestamp(),
        },
    )?;
    println!(
        "{experiment_id}: {} curve(s) -> {}",
        curves.len(),
        curves_path.display()
    );
    Ok(experiment_id)
}

fn model_label(config: &ExperimentConfig) -> String {
    let spec = config.segmenter_spec();
    match config.sweep.mode {
        SweepMode::ZeroShot => format!("{}-zero-shot", spec.backend.name()),
        SweepMode::FineTune => format!("{}-k={}", spec.backend.name(), config.run.fewshot.k),
    }
}

fn save_training_logs(
    dir: &Path,
    label: &str,
    logs: &[(u64, finetune::TrainingLog)],
) -> Result<(), CliError> {
    let safe: String = label
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '=' { c } else { '_' })
        .collect();
    for (seed, log) in logs {
        let path = dir.join(format!("train_log.{safe}.seed{seed}.csv"));
        log.write_csv(&path).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

/// Combine stored curves from completed experiments into one report.
pub fn report_cmd(
    experiment_ids: &[String],
    kind: ExperimentKind,
    out_root: &Path,
) -> Result<(), CliError> {
    let mut labeled = Vec::new();
    for id in experiment_ids {
        let record = index::find(out_root, id)?.ok_or_else(|| CliError::Data {
            message: format!("experiment `{id}` is not in the index at {}", out_root.display()),
        })?;
        let curves_path = record.artifacts.curves.ok_or_else(|| CliError::Data {
            message: format!("experiment `{id}` has no curves artifact (was it a sweep?)"),
        })?;
        let curves =
            ppsam_core::sweep::read_curves_csv(&curves_path).map_err(CliError::from_sweep)?;
        for curve in curves {
            labeled.push(LabeledCurve {
                experiment_id: id.clone(),
                curve,
            });
        }
    }
    let report_dir = out_root.join("reports");
    let paths = report::emit(kind, &labeled, &report_dir)?;
    println!("report: {}", paths.csv.display());
    println!("plot:   {}", paths.plot.display());
    if let Some(notes) = paths.notes {
        println!("notes:  {}", notes.display());
    }
    Ok(())
}

/// Generate a synthetic shapes dataset (and optionally a split file).
#[allow(clippy::too_many_arguments)]
pub fn synth_cmd(
    data_root: &Path,
    name: &str,
    count: usize,
    image_size: u32,
    distractors: usize,
    noise: u8,
    seed: u64,
    test_count: usize,
) -> Result<(), CliError> {
    let spec = ShapeDatasetSpec {
        count,
        image_size,
        distractors,
        noise,
        ..ShapeDatasetSpec::default()
    };
    synthetic::write_shape_dataset(data_root, name, &spec, seed).map_err(data_error)?;
    let manifest = load_manifest(data_root, name).map_err(data_error)?;
    println!(
        "{name}: wrote {} samples ({image_size}x{image_size}) under {}",
        manifest.len(),
        data_root.join(name).display()
    );
    if test_count > 0 {
        if test_count >= count {
            return Err(CliError::Config {
                message: format!("--test-count {test_count} must be below --count {count}"),
            });
        }
        let ids: Vec<String> = manifest.sample_ids().map(String::from).collect();
        let split = SplitFile {
            train: ids[..count - test_count].to_vec(),
            test: ids[count - test_count..].to_vec(),
        };
        let split_path = data_root.join(format!("{name}.split.json"));
        split.save(&split_path).map_err(data_error)?;
        println!(
            "{name}: split {} train / {} test -> {}",
            count - test_count,
            test_count,
            split_path.display()
        );
    }
    Ok(())
}

/// Hash a config file without running anything (plumbing for scripted
/// reuse checks).
pub fn fingerprint_cmd(config_path: &Path) -> Result<String, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let fp = config.fingerprint();
    println!("{fp}");
    Ok(fp)
}

pub fn ensure_out_dir(out_root: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_root).map_err(|e| CliError::io(out_root, e))?;
    // Touch the index so concurrent readers see a file.
    let path = index::index_path(out_root);
    if !path.exists() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.flush())
            .map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

//! Foundation adapter against a real child process: a mock runner
//! script that answers the line protocol with oracle-style predictions.

use std::fs;
use std::path::PathBuf;

use ppsam_core::data::load_manifest;
use ppsam_core::parallel::ExecMode;
use ppsam_core::segmenter::{build_model, BackendKind, GroupId, SegmenterSpec};
use ppsam_core::sweep::{evaluate_at_level, EvalOptions, EvalSet};
use ppsam_core::synthetic::{rectangle_spec, write_shape_dataset};

const MOCK_RUNNER: &str = r#"
import sys, json

res = 16
frozen = []
for line in sys.stdin:
    req = json.loads(line)
    op = req.get("op")
    if op == "init":
        print(json.dumps({
            "ok": True,
            "input_resolution": res,
            "normalization": {"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]},
            "parameter_groups": [
                {"group": "image_encoder", "count": 89670912},
                {"group": "prompt_encoder", "count": 6220},
                {"group": "mask_decoder", "count": 4058340},
            ],
        }), flush=True)
    elif op == "predict":
        x0, y0, x1, y1 = req["prompt"]
        probs = [0.0] * (res * res)
        for y in range(y0, y1):
            for x in range(x0, x1):
                probs[y * res + x] = 1.0
        print(json.dumps({"ok": True, "probabilities": probs}), flush=True)
    elif op == "set_freeze":
        frozen = [k for k in ("image_encoder", "prompt_encoder", "mask_decoder") if not req[k]]
        print(json.dumps({"ok": True}), flush=True)
    elif op == "begin_training":
        print(json.dumps({"ok": True}), flush=True)
    elif op == "train_step":
        print(json.dumps({"ok": True, "loss": 0.5}), flush=True)
    elif op == "export_state":
        print(json.dumps({"ok": True, "state": "mock-blob"}), flush=True)
    elif op == "import_state":
        print(json.dumps({"ok": True}), flush=True)
    elif op == "shutdown":
        print(json.dumps({"ok": True}), flush=True)
        break
    else:
        print(json.dumps({"ok": False, "error": "unknown op"}), flush=True)
"#;

fn write_runner(dir: &std::path::Path) -> PathBuf {
    let path = dir.join("mock_runner.py");
    fs::write(&path, MOCK_RUNNER).unwrap();
    path
}

fn foundation_spec(dir: &std::path::Path) -> SegmenterSpec {
    let runner = write_runner(dir);
    SegmenterSpec {
        backend: BackendKind::Foundation,
        variant: "B".into(),
        input_resolution: None,
        checkpoint: Some(dir.join("upstream-weights.pth")),
        runner: Some(vec![
            "python3".into(),
            runner.to_string_lossy().into_owned(),
        ]),
        init_seed: 0,
    }
}

#[test]
fn spawns_runner_and_reads_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let model = build_model(&foundation_spec(tmp.path())).unwrap();
    assert_eq!(model.backend(), BackendKind::Foundation);
    assert_eq!(model.input_resolution(), 16);
    let groups = model.parameter_groups().unwrap();
    assert_eq!(groups.len(), 3);
    assert_eq!(groups[0].group_id, GroupId::ImageEncoder);
    assert!(groups[0].parameter_count > groups[2].parameter_count);
}

#[test]
fn evaluation_pipeline_runs_unmodified_on_the_foundation_backend() {
    let tmp = tempfile::tempdir().unwrap();
    write_shape_dataset(tmp.path(), "tiny", &rectangle_spec(6, 16), 3).unwrap();
    let manifest = load_manifest(tmp.path(), "tiny").unwrap();

    let model = build_model(&foundation_spec(tmp.path())).unwrap();
    let eval = EvalSet::load(
        &manifest,
        model.input_resolution(),
        &model.normalization(),
        &EvalOptions::default(),
    )
    .unwrap();
    // The mock predicts the prompt interior, so tight prompts score 100
    // and the curve decays exactly like the oracle's closed form.
    let at_zero = evaluate_at_level(&model, &eval, 0, ExecMode::Parallel).unwrap();
    assert_eq!(at_zero.value(), 100.0);
    let at_four = evaluate_at_level(&model, &eval, 4, ExecMode::Parallel).unwrap();
    assert!(at_four.value() < at_zero.value());
}

#[test]
fn freeze_policy_and_training_session_travel_the_protocol() {
    use ppsam_core::finetune::{FreezePolicy, LossWeights};
    use ppsam_core::geometry::{BoundingBox, Dimensions};
    use ppsam_core::segmenter::{TrainItem, TrainSettings};

    let tmp = tempfile::tempdir().unwrap();
    let mut model = build_model(&foundation_spec(tmp.path())).unwrap();
    model
        .begin_training(&TrainSettings {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            freeze: FreezePolicy::default(),
        })
        .unwrap();
    let groups = model.parameter_groups().unwrap();
    assert!(groups[0].trainable && groups[1].trainable && !groups[2].trainable);

    let image = ppsam_core::data::ImageTensor::new(16, 16, vec![0.0; 3 * 256]);
    let bbox = BoundingBox::new(2, 2, 10, 10).unwrap();
    let gt = bbox.to_mask(Dimensions::square(16));
    let loss = model
        .train_step_batch(
            &[TrainItem {
                image: &image,
                prompt: bbox,
                gt: &gt,
            }],
            LossWeights::default(),
        )
        .unwrap();
    assert_eq!(loss, 0.5, "mock runner reports a fixed loss");

    let weights = model.export_weights().unwrap();
    model.import_weights(&weights).unwrap();
}

//! Sequential vs parallel evaluation throughput on the oracle backend.
//!
//! `ExecMode::Parallel` spreads per-sample prediction and scoring over
//! rayon workers; `ExecMode::Sequential` is the fallback used when the
//! `parallel` feature is off. Run with `cargo bench -p ppsam-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ppsam_core::data::{DatasetRole, Normalization, SampleRecord};
use ppsam_core::parallel::ExecMode;
use ppsam_core::segmenter::{build_model, SegmenterSpec};
use ppsam_core::sweep::{evaluate_at_level, EvalOptions, EvalSet};
use ppsam_core::synthetic::{rectangle_spec, write_shape_dataset};

fn prepare_eval_set(sample_count: usize, resolution: u32) -> (tempfile::TempDir, EvalSet) {
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec = {
        let mut spec = rectangle_spec(sample_count, resolution);
        spec.count = sample_count;
        spec
    };
    write_shape_dataset(tmp.path(), "bench", &spec, 7).expect("dataset");
    let manifest = ppsam_core::data::load_manifest(tmp.path(), "bench").expect("manifest");
    let _ = DatasetRole::Train;
    let _ = std::marker::PhantomData::<SampleRecord>;
    let eval = EvalSet::load(
        &manifest,
        resolution,
        &Normalization::identity(),
        &EvalOptions::default(),
    )
    .expect("eval set");
    (tmp, eval)
}

fn bench_evaluate_at_level(c: &mut Criterion) {
    let resolution = 128;
    let (_tmp, eval) = prepare_eval_set(64, resolution);
    let model = build_model(&SegmenterSpec::oracle(resolution)).expect("oracle");

    let mut group = c.benchmark_group("evaluate_at_level_64x128px");
    for (name, mode) in [
        ("sequential", ExecMode::Sequential),
        ("parallel", ExecMode::Parallel),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                let score = evaluate_at_level(&model, &eval, black_box(30), mode).unwrap();
                black_box(score)
            });
        });
    }
    group.finish();
}

fn bench_surrogate_sweep(c: &mut Criterion) {
    let resolution = 64;
    let (_tmp, eval) = prepare_eval_set(32, resolution);
    let model = build_model(&SegmenterSpec::surrogate(resolution, 3)).expect("surrogate");

    let mut group = c.benchmark_group("surrogate_level_sweep_32x64px");
    group.sample_size(10);
    for (name, mode) in [
        ("sequential", ExecMode::Sequential),
        ("parallel", ExecMode::Parallel),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                for level in [0u32, 25, 50, 75, 100] {
                    let score = evaluate_at_level(&model, &eval, level, mode).unwrap();
                    black_box(score);
                }
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate_at_level, bench_surrogate_sweep);
criterion_main!(benches);

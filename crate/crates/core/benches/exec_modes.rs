use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use slidexfer::annot::rasterize_mask;
use slidexfer::metrics::{build_probability_map, pixel_histogram, prepare_slide, score_slide, EvalConfig, EvalSlide};
use slidexfer::nnet::{init_params, predict_dataset, Checkpoint, ModelSpec, Provenance};
use slidexfer::synth::{gen_slide, Domain};
use slidexfer::tiler::{label_slide, TissueThresholds};
use slidexfer::Exec;

const SIDE: usize = 1024;
const TILE: usize = 32;

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench(c: &mut Criterion) {
    let slide = gen_slide(&Domain::B.spec(), 5, SIDE, SIDE).unwrap();
    let tissue = TissueThresholds::default();

    let mut g = c.benchmark_group("rasterize_mask");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rasterize_mask(&slide.annotations, SIDE, SIDE, exec))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("label_slide");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| label_slide("bench", &slide.image, &slide.mask, TILE, &tissue, 0.5, exec).unwrap())
        });
    }
    g.finish();

    let spec = ModelSpec::default();
    let ckpt = Checkpoint {
        spec: spec.clone(),
        params: init_params(&spec, 1),
        epoch: 0,
        val_loss: 0.0,
        provenance: Provenance::Scratch,
        source_digest: None,
    };
    let cfg = EvalConfig { tile_size: TILE, ..EvalConfig::default() };
    let eval = EvalSlide { slide_id: "bench".into(), image: slide.image.clone(), mask: slide.mask.clone() };
    let prepared = prepare_slide(&eval, spec.input_size, &cfg, Exec::Parallel).unwrap();

    let mut g = c.benchmark_group("predict_dataset");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_dataset(&ckpt.spec, &ckpt.params, &prepared.inputs, exec).unwrap())
        });
    }
    g.finish();

    let scored = score_slide(&ckpt, &prepared, &cfg, Exec::Parallel).unwrap();
    let map = build_probability_map("bench", &scored, prepared.cols, prepared.rows, TILE).unwrap();
    let mut g = c.benchmark_group("pixel_histogram");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pixel_histogram(&map, &slide.mask, false, cfg.bins, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use stormadapt::detcore::proposals::nms;
use stormadapt::detcore::{Detection, Mode};
use stormadapt::evalkit::{mean_ap, ImageDetections};
use stormadapt::experiment::ExperimentConfig;
use stormadapt::geometry::BBox;
use stormadapt::raster::{DepthMap, Image};
use stormadapt::toyscenes::{generate_sample, Split};
use stormadapt::weathergen::{synth_fog, FogParams, Intensity};

fn random_box(rng: &mut StdRng, extent: f64) -> BBox {
    let (x, y) = (rng.gen_range(0.0..extent - 30.0), rng.gen_range(0.0..extent - 30.0));
    BBox::new(x, y, x + rng.gen_range(8.0..30.0), y + rng.gen_range(8.0..30.0))
}

fn bench_fog(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth_fog");
    for side in [64, 160] {
        let image = Image::filled(side, side, 3, 0.4);
        let depth = DepthMap::new(side, side, (0..side * side).map(|i| 10.0 + (i % 290) as f64).collect()).unwrap();
        let params = FogParams::for_level(Intensity::Large);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| synth_fog(black_box(&image), &depth, &params).unwrap())
        });
    }
    group.finish();
}

fn bench_nms(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let boxes: Vec<BBox> = (0..300).map(|_| random_box(&mut rng, 64.0)).collect();
    let scores: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
    c.bench_function("nms_300", |b| b.iter(|| nms(black_box(&boxes), &scores, 0.7)));
}

fn bench_map(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(2);
    let set: Vec<ImageDetections> = (0..100)
        .map(|i| ImageDetections {
            image_id: format!("{i:04}"),
            ground_truth: (0..4).map(|_| (random_box(&mut rng, 96.0), rng.gen_range(0..3))).collect(),
            predictions: (0..20)
                .map(|_| Detection {
                    bbox: random_box(&mut rng, 96.0),
                    class: rng.gen_range(0..3),
                    score: rng.gen(),
                })
                .collect(),
        })
        .collect();
    c.bench_function("mean_ap_100_images", |b| b.iter(|| mean_ap(black_box(&set), 3).unwrap()));
}

fn bench_detector(c: &mut Criterion) {
    let cfg = ExperimentConfig::toy_fog();
    let sample = generate_sample(&cfg.data, Split::Train, 0).unwrap();
    let trainer = cfg.trainer().unwrap();
    c.bench_function("detect_64px", |b| {
        b.iter(|| trainer.detector.detect(&trainer.params, black_box(&sample.triplet.target.image)).unwrap())
    });

    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for mode in [Mode::SourceOnly, Mode::Baseline, Mode::Full] {
        let t = cfg.with_run(mode, 0).trainer().unwrap();
        group.bench_function(mode.name(), |b| {
            b.iter(|| t.gradients(&t.params, black_box(&sample.triplet), 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_fog, bench_nms, bench_map, bench_detector);
criterion_main!(benches);

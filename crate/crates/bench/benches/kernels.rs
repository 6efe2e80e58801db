use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mavlkit::geometry::nms_class_agnostic;
use mavlkit::mask2box::{connected_components, BinaryMask, Connectivity};
use mavlkit::matching_losses::hungarian;
use mavlkit::model::{model_forward, ModelConfig, ModelParams, TokenQuery};
use mavlkit::msda::{msda_forward, FeaturePyramid, MsdaParams, MsdaShape, ReferencePoint};
use mavlkit::{Detection, Rect, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_detections(n: usize, rng: &mut ChaCha8Rng) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0));
            let r = Rect::new(x, y, x + rng.gen_range(5.0..80.0), y + rng.gen_range(5.0..80.0)).unwrap();
            Detection::new(1, r, rng.gen_range(0.0..1.0))
        })
        .collect()
}

fn nms(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("nms");
    for n in [100, 300, 1000] {
        let dets = random_detections(n, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &dets, |b, d| b.iter(|| nms_class_agnostic(black_box(d), 0.5)));
    }
    g.finish();
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("hungarian");
    for (q, m) in [(24, 4), (100, 20), (300, 50)] {
        let cost = Tensor::from_fn(&[q, m], |_| rng.gen_range(0.0..10.0));
        g.bench_with_input(BenchmarkId::from_parameter(format!("{q}x{m}")), &cost, |b, c| b.iter(|| hungarian(black_box(c)).unwrap()));
    }
    g.finish();
}

fn msda(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = MsdaShape { channels: 64, heads: 4, levels: 3, points: 4 };
    let params = MsdaParams::init(shape, 0).unwrap();
    let maps: Vec<Tensor> = [8, 4, 2].iter().map(|&s| Tensor::from_fn(&[s, s, 64], |_| rng.gen_range(-1.0..1.0))).collect();
    let pyramid = FeaturePyramid::from_maps(&maps, &[8, 16, 32]).unwrap();
    let queries = Tensor::from_fn(&[24, 64], |_| rng.gen_range(-1.0..1.0));
    let refs: Vec<ReferencePoint> = (0..24).map(|_| ReferencePoint::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)).unwrap()).collect();
    c.bench_function("msda_forward/24q_3l_4h_4p", |b| {
        b.iter(|| msda_forward(black_box(&queries), &refs, &pyramid, &params).unwrap())
    });
}

fn components(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = c.benchmark_group("connected_components");
    for side in [64, 256] {
        let mask = BinaryMask::new(side, side, (0..side * side).map(|_| rng.gen_bool(0.45)).collect()).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(side), &mask, |b, m| {
            b.iter(|| connected_components(black_box(m), Connectivity::Eight))
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let params = ModelParams::init(ModelConfig::default()).unwrap();
    let s = params.config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Tensor::from_fn(&[s, s, 1], |_| rng.gen_range(0.0..1.0));
    let query = TokenQuery::parse("small objects").unwrap();
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    g.bench_function("forward_default", |b| b.iter(|| model_forward(black_box(&image), &query, &params).unwrap()));
    g.finish();
}

criterion_group!(benches, nms, matching, msda, components, forward);
criterion_main!(benches);

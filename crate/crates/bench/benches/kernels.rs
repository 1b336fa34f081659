use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hcvt_core::autograd::Graph;
use hcvt_core::gam::{self, GateParams, GatingMode};
use hcvt_core::metrics;
use hcvt_core::model::{Model, ModelConfig, Sample};
use hcvt_core::ndarray::Array3;
use hcvt_core::preprocess::siz_resample;
use hcvt_core::{Sequence, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gating(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = 1024;
    let inputs: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.random()).collect()).collect();
    let params: Vec<GateParams> = (0..4).map(|_| GateParams::init(d, &mut rng)).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    c.bench_function("global_fuse_n4_d1024", |b| {
        b.iter(|| gam::fuse(black_box(&refs), &params, GatingMode::default()).unwrap())
    });
    let grad = vec![1.0; d];
    c.bench_function("fuse_backward_n4_d1024", |b| {
        b.iter(|| gam::fuse_backward(black_box(&refs), &params, GatingMode::default(), &grad).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let m = Model::<f32>::init(cfg.clone(), 0).unwrap();
    let sample = Sample::random(&cfg, "P", 0);
    let mut group = c.benchmark_group("tiny_model");
    group.sample_size(10);
    group.bench_function("forward", |b| b.iter(|| m.predict(black_box(&sample)).unwrap()));
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(m.params());
            let t = m.forward(&mut g, black_box(&sample)).unwrap();
            let l = g.bce_with_logits(t.logit, 1.0);
            g.backward(l)
        })
    });
    group.finish();
}

fn preprocessing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Volume::new(
        Array3::from_shape_simple_fn((40, 64, 64), || rng.random::<f32>()),
        Sequence::T2,
        "P",
    );
    c.bench_function("siz_40_to_13_64px", |b| b.iter(|| siz_resample(black_box(&v), 13).unwrap()));
}

fn auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 2000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    c.bench_function("auc_ranksum_2000", |b| {
        b.iter(|| metrics::auc_ranksum(black_box(&scores), &labels).unwrap())
    });
    c.bench_function("auc_pairwise_2000", |b| {
        b.iter(|| metrics::auc_pairwise(black_box(&scores), &labels).unwrap())
    });
}

criterion_group!(benches, gating, model, preprocessing, auc);
criterion_main!(benches);

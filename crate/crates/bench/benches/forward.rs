use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use stageprompt_core::prompt::extract_hfc;
use stageprompt_core::{AdapterConfig, BackboneConfig, PromptConfig, Segmenter};

fn image(n: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    Array3::from_shape_fn((n, n, 3), |_| rng.random())
}

fn bench_hfc(c: &mut Criterion) {
    let img = image(128);
    c.bench_function("hfc_128_tau0.25", |b| {
        b.iter(|| extract_hfc(black_box(&img), 0.25))
    });
}

fn bench_forward(c: &mut Criterion) {
    let img = image(64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = BackboneConfig::toy_hiera((64, 64));
    let adapted = Segmenter::new(
        cfg.clone(),
        Some(&AdapterConfig::default()),
        &PromptConfig::default(),
        &mut rng,
    )
    .unwrap();
    let plain = Segmenter::new(cfg, None, &PromptConfig::default(), &mut rng).unwrap();
    let mut g = c.benchmark_group("forward_toy_hiera_64");
    g.sample_size(20);
    g.bench_function("with_adapters", |b| {
        b.iter(|| adapted.predict_logits(black_box(&img)))
    });
    g.bench_function("decoder_only", |b| {
        b.iter(|| plain.predict_logits(black_box(&img)))
    });
    g.finish();
}

criterion_group!(benches, bench_hfc, bench_forward);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use peftlab::autodiff::{Graph, Tensor};
use peftlab::losses::ctc_nll_and_grad;
use peftlab::model::{apply_peft, build_model, random_features, ModelConfig, ModelMode, PeftConfig, PeftMethod};
use peftlab::signal::{FrontendConfig, Waveform};

/// Deterministic values in [-0.5, 0.5).
fn lcg(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

fn log_softmax_rows(t: usize, v: usize) -> Tensor {
    let raw = lcg(t * v, 1);
    let mut out = Vec::with_capacity(t * v);
    for row in raw.chunks(v) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new([t, v], out).unwrap()
}

fn bench_ctc(c: &mut Criterion) {
    let lp = log_softmax_rows(100, 30);
    let target: Vec<usize> = (0..25).map(|i| 4 + i % 20).collect();
    c.bench_function("ctc_nll_and_grad T=100 V=30 L=25", |b| {
        b.iter(|| ctc_nll_and_grad(black_box(&lp), black_box(&target), 0).unwrap())
    });
}

fn bench_frontend(c: &mut Criterion) {
    let wave = Waveform::new(lcg(32_000, 2), 16_000).unwrap();
    let fe = FrontendConfig::default();
    c.bench_function("log-mel frontend 2 s", |b| b.iter(|| fe.extract(black_box(&wave)).unwrap()));
}

fn bench_matmul(c: &mut Criterion) {
    let a = Tensor::new([128, 128], lcg(128 * 128, 3)).unwrap();
    let w = Tensor::new([128, 128], lcg(128 * 128, 4)).unwrap();
    c.bench_function("graph matmul 128x128 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.input(a.clone(), true);
            let y = g.input(w.clone(), true);
            let z = g.matmul(x, y).unwrap();
            let s = g.sum_all(z);
            g.backward(s).unwrap()
        })
    });
}

fn bench_encoder(c: &mut Criterion) {
    let mut cfg = ModelConfig::toy(ModelMode::Ctc);
    cfg.subsample = 3;
    let model = apply_peft(build_model(&cfg, 0).unwrap(), &PeftConfig::toy(PeftMethod::Lora)).unwrap();
    let feat = random_features(240, cfg.n_mels, 5);
    let valid = vec![true; 240];
    c.bench_function("toy encoder fwd+bwd 240 frames", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = model.store().bind(&mut g);
            let enc = model.encode(&mut g, &bound, black_box(&feat), &valid).unwrap();
            let s = g.mean_all(enc.states);
            g.backward(s).unwrap()
        })
    });
}

criterion_group!(benches, bench_ctc, bench_frontend, bench_matmul, bench_encoder);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use driftlearn_core::eval::{align, bootstrap_ci, AlignmentCounts, UtteranceScore};
use driftlearn_core::nncore::{Activation, FrameBatch, Matrix, MlpConfig, Network};
use driftlearn_core::regularizers::{estimate_fisher_diag, FisherConfig, SiState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn setup(frames: usize) -> (Network, FrameBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Network::init(MlpConfig {
        layer_sizes: vec![16, 32, 32],
        activation: Activation::Tanh,
        seed: 1,
    })
    .unwrap();
    let data = (0..frames * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..frames).map(|_| rng.random_range(0..32)).collect();
    (net, FrameBatch::new(Matrix::new(frames, 16, data).unwrap(), labels).unwrap())
}

fn network(c: &mut Criterion) {
    let (net, batch) = setup(512);
    c.bench_function("loss_and_grad/512x16-32-32", |b| {
        b.iter(|| net.loss_and_grad(black_box(&batch)).unwrap())
    });
    let (net, batch) = setup(4000);
    let cfg = FisherConfig::default();
    c.bench_function("fisher/2000 samples", |b| {
        b.iter(|| estimate_fisher_diag(&net, black_box(&batch), &cfg).unwrap())
    });
    let mut si = SiState::new(net.params(), 0.1, 1e-3).unwrap();
    si.begin_task(net.params()).unwrap();
    let (_, grad) = net.loss_and_grad(&batch).unwrap();
    c.bench_function("si/accumulate", |b| {
        b.iter(|| si.accumulate(black_box(&grad), black_box(&grad)).unwrap())
    });
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r: Vec<u32> = (0..60).map(|_| rng.random_range(0..32)).collect();
    let h: Vec<u32> = r.iter().map(|&t| if rng.random_bool(0.2) { rng.random_range(0..32) } else { t }).collect();
    c.bench_function("align/60 tokens", |b| b.iter(|| align(black_box(&r), black_box(&h))));

    let scores: Vec<UtteranceScore> = (0..300)
        .map(|id| UtteranceScore {
            id,
            counts: AlignmentCounts {
                substitutions: rng.random_range(0..10),
                deletions: 0,
                insertions: 0,
                ref_len: 30,
            },
        })
        .collect();
    c.bench_function("bootstrap/300 utts x 1000", |b| {
        b.iter_batched(|| scores.clone(), |s| bootstrap_ci(&s, 1000, 0.95, 0).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, network, scoring);
criterion_main!(benches);

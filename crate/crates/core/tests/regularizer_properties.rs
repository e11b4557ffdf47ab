use driftlearn_core::nncore::{Activation, FrameBatch, Matrix, MlpConfig, Network, ParamVector};
use driftlearn_core::regularizers::{
    estimate_fisher_diag, regularized_loss_and_grad, EwcState, FisherConfig, FisherMode, RegState,
    SiState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient descent on L(θ) = ½θ² from θ = 1, crediting every step to SI.
/// Returns (Σω, L(start) − L(end)).
fn si_on_quadratic(lr: f64, steps: usize) -> (f64, f64) {
    let theta0 = ParamVector::from_flat(vec![1.0]);
    let mut si = SiState::new(&theta0, 1.0, 1e-3).unwrap();
    si.begin_task(&theta0).unwrap();
    let mut theta = 1.0_f64;
    for _ in 0..steps {
        let grad = theta;
        let next = theta - lr * grad;
        let delta = next - theta;
        si.accumulate(
            &ParamVector::from_flat(vec![grad]),
            &ParamVector::from_flat(vec![delta]),
        )
        .unwrap();
        theta = next;
    }
    let sum_omega: f64 = si.omega_running.values().iter().sum();
    (sum_omega, 0.5 - 0.5 * theta * theta)
}

#[test]
fn si_omega_tracks_loss_decrease() {
    let (omega, drop) = si_on_quadratic(1e-3, 1000);
    let err = (omega - drop).abs() / drop;
    assert!(err < 0.02, "relative error {err}");

    let (omega_half, drop_half) = si_on_quadratic(5e-4, 1000);
    let err_half = (omega_half - drop_half).abs() / drop_half;
    assert!(err_half < err);
}

#[test]
fn si_omega_converges_to_full_loss_when_run_to_minimum() {
    let (omega, _) = si_on_quadratic(1e-3, 10_000);
    let err = (omega - 0.5).abs() / 0.5;
    assert!(err < 0.02, "relative error {err}");
    let (omega_half, _) = si_on_quadratic(5e-4, 20_000);
    assert!((omega_half - 0.5).abs() / 0.5 < err);
}

fn toy_model(seed: u64) -> Network {
    Network::init(MlpConfig {
        layer_sizes: vec![4, 6, 3],
        activation: Activation::Tanh,
        seed,
    })
    .unwrap()
}

fn toy_data(seed: u64, frames: usize) -> FrameBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = [[1.0, 0.0, -1.0, 0.5], [-1.0, 1.0, 0.0, 0.0], [0.0, -1.0, 1.0, -0.5]];
    let mut data = Vec::with_capacity(frames * 4);
    let mut labels = Vec::with_capacity(frames);
    for _ in 0..frames {
        let y = rng.random_range(0..3);
        for m in means[y] {
            data.push(m + rng.random_range(-0.7..0.7));
        }
        labels.push(y);
    }
    FrameBatch::new(Matrix::new(frames, 4, data).unwrap(), labels).unwrap()
}

fn split(batch: &FrameBatch) -> (FrameBatch, FrameBatch) {
    let half = batch.len() / 2;
    let cols = batch.features().cols();
    let take = |range: std::ops::Range<usize>| {
        let mut rows = Vec::new();
        for r in range.clone() {
            rows.extend_from_slice(batch.features().row(r));
        }
        FrameBatch::new(
            Matrix::new(range.len(), cols, rows).unwrap(),
            batch.labels()[range].to_vec(),
        )
        .unwrap()
    };
    (take(0..half), take(half..batch.len()))
}

#[test]
fn disjoint_half_sample_fisher_estimates_agree() {
    let net = toy_model(3);
    let data = toy_data(21, 4000);
    let (a, b) = split(&data);
    for mode in [FisherMode::AllClasses, FisherMode::ModelWeighted] {
        let cfg = FisherConfig {
            mode,
            n_samples: 2000,
            seed: 5,
        };
        let fa = estimate_fisher_diag(&net, &a, &cfg).unwrap();
        let fb = estimate_fisher_diag(&net, &b, &cfg).unwrap();
        assert!(fa.values().iter().chain(fb.values()).all(|&v| v >= 0.0));
        let n = fa.len() as f64;
        let mad: f64 = fa.values().iter().zip(fb.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let scale: f64 = fa.values().iter().zip(fb.values()).map(|(x, y)| 0.5 * (x + y)).sum::<f64>() / n;
        assert!(mad / scale < 0.25, "{mode:?}: relative MAD {}", mad / scale);
    }
}

#[test]
fn fisher_is_deterministic_in_seed() {
    let net = toy_model(3);
    let data = toy_data(2, 500);
    let cfg = FisherConfig {
        mode: FisherMode::AllClasses,
        n_samples: 100,
        seed: 9,
    };
    assert_eq!(
        estimate_fisher_diag(&net, &data, &cfg).unwrap(),
        estimate_fisher_diag(&net, &data, &cfg).unwrap()
    );
}

fn weighted_distance(theta: &ParamVector, anchor: &ParamVector, fisher: &ParamVector) -> f64 {
    theta
        .values()
        .iter()
        .zip(anchor.values())
        .zip(fisher.values())
        .map(|((t, a), f)| f * (t - a) * (t - a))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn ewc_freezes_parameters_as_lambda_grows() {
    let start = toy_model(8);
    let new_task = toy_data(99, 300);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fisher = ParamVector::new(
        (0..start.params().len()).map(|_| rng.random_range(0.5..1.0)).collect(),
        start.layout().clone(),
    )
    .unwrap();
    let mut distances = Vec::new();
    for lambda in [0.0, 1.0, 10.0, 1e3] {
        let state = RegState::Ewc(EwcState::new(start.params().clone(), fisher.clone(), lambda).unwrap());
        let mut net = start.clone();
        for _ in 0..400 {
            let (_, grad) = regularized_loss_and_grad(&net, &new_task, &state).unwrap();
            net.apply_sgd(&grad, 1e-3).unwrap();
        }
        distances.push(weighted_distance(net.params(), start.params(), &fisher));
    }
    for w in distances.windows(2) {
        assert!(w[1] < w[0], "distances not strictly decreasing: {distances:?}");
    }
}

#[test]
fn ewc_keeps_one_anchor_while_si_accumulates_every_task() {
    let mut net = toy_model(12);
    let theta0 = net.params().clone();
    let mut ewc = EwcState::unanchored(&theta0, 0.1).unwrap();
    let mut si = SiState::new(&theta0, 0.1, 1e-3).unwrap();
    let fisher_cfg = FisherConfig {
        n_samples: 200,
        ..FisherConfig::default()
    };
    let mut expected_omega = theta0.zeros_like();
    let mut ends = Vec::new();
    for task in 0..3u64 {
        let data = toy_data(500 + task, 200);
        let start = net.params().clone();
        si.begin_task(&start).unwrap();
        let mut running = theta0.zeros_like();
        for _ in 0..30 {
            let (_, grad) = net.loss_and_grad(&data).unwrap();
            let delta = net.apply_sgd(&grad, 0.1).unwrap();
            si.accumulate(&grad, &delta).unwrap();
            for ((r, g), d) in running.values_mut().iter_mut().zip(grad.values()).zip(delta.values()) {
                *r -= g * d;
            }
        }
        let end = net.params().clone();
        for (((e, r), a), b) in expected_omega
            .values_mut()
            .iter_mut()
            .zip(running.values())
            .zip(end.values())
            .zip(start.values())
        {
            *e += r / ((a - b) * (a - b) + 1e-3);
        }
        si.consolidate(&end).unwrap();
        ewc.consolidate(&net, &data, &fisher_cfg).unwrap();
        ends.push(end);
    }
    assert_eq!(ewc.consolidations, 3);
    assert_eq!(&ewc.theta_star, ends.last().unwrap());
    let last_fisher = estimate_fisher_diag(&net, &toy_data(502, 200), &fisher_cfg).unwrap();
    assert_eq!(ewc.fisher_diag, last_fisher);

    assert_eq!(si.consolidations, 3);
    assert_eq!(&si.theta_anchor, ends.last().unwrap());
    for (got, want) in si.big_omega.values().iter().zip(expected_omega.values()) {
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

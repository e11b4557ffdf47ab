//! Analytic gradients checked against central finite differences.

use driftlearn_core::nncore::{Activation, FrameBatch, Matrix, MlpConfig, Network, ParamVector};
use driftlearn_core::regularizers::{weighted_quadratic, EwcState, SiState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn random_batch(rng: &mut ChaCha8Rng, frames: usize, dim: usize, vocab: usize) -> FrameBatch {
    let data = (0..frames * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..frames).map(|_| rng.random_range(0..vocab)).collect();
    FrameBatch::new(Matrix::new(frames, dim, data).unwrap(), labels).unwrap()
}

fn fd_task_loss(net: &Network, batch: &FrameBatch, i: usize) -> f64 {
    let mut plus = net.clone();
    plus.params_mut().values_mut()[i] += EPS;
    let mut minus = net.clone();
    minus.params_mut().values_mut()[i] -= EPS;
    let (lp, _) = plus.loss_and_grad(batch).unwrap();
    let (lm, _) = minus.loss_and_grad(batch).unwrap();
    (lp - lm) / (2.0 * EPS)
}

fn max_task_grad_error(sizes: &[usize], activation: Activation, seed: u64, frames: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let net = Network::init(MlpConfig {
        layer_sizes: sizes.to_vec(),
        activation,
        seed,
    })
    .unwrap();
    let mut net = net;
    // Non-zero biases so every parameter kind is exercised.
    for v in net.params_mut().values_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    let batch = random_batch(&mut rng, frames, sizes[0], *sizes.last().unwrap());
    let (_, grad) = net.loss_and_grad(&batch).unwrap();
    (0..grad.len())
        .map(|i| {
            let numeric = fd_task_loss(&net, &batch, i);
            let analytic = grad.values()[i];
            // Entries that are numerically zero on both sides carry no signal.
            if analytic.abs() < 1e-9 && numeric.abs() < 1e-9 {
                0.0
            } else {
                rel_err(analytic, numeric)
            }
        })
        .fold(0.0, f64::max)
}

#[test]
fn task_gradient_matches_finite_differences_on_3_5_4() {
    let err = max_task_grad_error(&[3, 5, 4], Activation::Tanh, 17, 10);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn task_gradient_matches_finite_differences_seeded_cases() {
    let shapes: [&[usize]; 4] = [&[3, 5, 4], &[4, 6, 3], &[2, 4, 4, 5], &[5, 3]];
    for seed in 0..24u64 {
        let sizes = shapes[(seed % 4) as usize];
        let err = max_task_grad_error(sizes, Activation::Tanh, seed, 6 + seed as usize % 5);
        assert!(err < 1e-4, "seed {seed} shape {sizes:?}: max relative error {err}");
    }
}

#[test]
fn relu_gradient_matches_away_from_kinks() {
    // Kinks make finite differences unreliable only when a pre-activation sits
    // within EPS of zero; random seeds keep that improbable.
    for seed in 100..110u64 {
        let err = max_task_grad_error(&[3, 6, 4], Activation::Relu, seed, 8);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

fn random_pv(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> ParamVector {
    ParamVector::from_flat((0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Magnitudes in [lo, hi] with random sign. Central differences of a quadratic
/// carry no truncation error, only rounding of the summed penalty; keeping every
/// component away from zero keeps that rounding well below 1e-8 relative.
fn random_signed_pv(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> ParamVector {
    ParamVector::from_flat(
        (0..n)
            .map(|_| {
                let m = rng.random_range(lo..hi);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect(),
    )
}

fn fd_penalty(f: impl Fn(&ParamVector) -> f64, theta: &ParamVector, i: usize) -> f64 {
    let mut plus = theta.clone();
    plus.values_mut()[i] += EPS;
    let mut minus = theta.clone();
    minus.values_mut()[i] -= EPS;
    (f(&plus) - f(&minus)) / (2.0 * EPS)
}

#[test]
fn ewc_penalty_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let anchor = random_pv(&mut rng, n, -2.0, 2.0);
        let mut theta = random_signed_pv(&mut rng, n, 0.5, 2.0);
        theta.add_scaled(&anchor, 1.0).unwrap();
        let fisher = random_pv(&mut rng, n, 0.5, 3.0);
        let state = EwcState::new(anchor, fisher, rng.random_range(0.01..5.0)).unwrap();
        let (_, grad) = state.penalty(&theta).unwrap();
        for i in 0..n {
            let numeric = fd_penalty(|t| state.penalty(t).unwrap().0, &theta, i);
            let err = rel_err(grad.values()[i], numeric);
            assert!(err < 1e-8, "seed {seed} index {i}: {err}");
        }
    }
}

#[test]
fn si_penalty_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = 12;
        let anchor = random_pv(&mut rng, n, -2.0, 2.0);
        let mut theta = random_signed_pv(&mut rng, n, 0.5, 2.0);
        theta.add_scaled(&anchor, 1.0).unwrap();
        let mut state = SiState::new(&anchor, rng.random_range(0.01..2.0), 1e-3).unwrap();
        // Include negative importances: the clamp must be reflected in the gradient.
        state.big_omega = random_signed_pv(&mut rng, n, 0.5, 4.0);
        let (_, grad) = state.penalty(&theta).unwrap();
        for i in 0..n {
            let numeric = fd_penalty(|t| state.penalty(t).unwrap().0, &theta, i);
            let analytic = grad.values()[i];
            if analytic == 0.0 {
                assert!(numeric.abs() < 1e-9);
                continue;
            }
            let err = rel_err(analytic, numeric);
            assert!(err < 1e-8, "seed {seed} index {i}: {err}");
        }
    }
}

#[test]
fn both_penalties_are_the_shared_quadratic_form() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + seed);
        let n = 15;
        let theta = random_pv(&mut rng, n, -3.0, 3.0);
        let anchor = random_pv(&mut rng, n, -3.0, 3.0);
        let importance = random_pv(&mut rng, n, 0.0, 5.0);
        let lambda = rng.random_range(0.0..2.0);

        let ewc = EwcState::new(anchor.clone(), importance.clone(), lambda).unwrap();
        let (p1, g1) = ewc.penalty(&theta).unwrap();
        let (p2, g2) = weighted_quadratic(&theta, &anchor, &importance, lambda / 2.0).unwrap();
        assert!((p1 - p2).abs() <= 1e-12 * p1.abs().max(1.0));
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        let alpha = rng.random_range(0.0..2.0);
        let mut si = SiState::new(&anchor, alpha, 1e-3).unwrap();
        si.big_omega = random_pv(&mut rng, n, -1.0, 5.0);
        let (p1, g1) = si.penalty(&theta).unwrap();
        let (p2, g2) = weighted_quadratic(&theta, &anchor, &si.effective_importance(), alpha).unwrap();
        assert!((p1 - p2).abs() <= 1e-12 * p1.abs().max(1.0));
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn duplicated_frames_leave_loss_and_grad_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Network::init(MlpConfig {
        layer_sizes: vec![3, 5, 4],
        activation: Activation::Tanh,
        seed: 5,
    })
    .unwrap();
    let batch = random_batch(&mut rng, 7, 3, 4);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in 0..batch.len() {
        for _ in 0..2 {
            rows.extend_from_slice(batch.features().row(r));
            labels.push(batch.labels()[r]);
        }
    }
    let doubled = FrameBatch::new(Matrix::new(14, 3, rows).unwrap(), labels).unwrap();
    let (l1, g1) = net.loss_and_grad(&batch).unwrap();
    let (l2, g2) = net.loss_and_grad(&doubled).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    for (a, b) in g1.values().iter().zip(g2.values()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn train_step_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Network::init(MlpConfig {
        layer_sizes: vec![4, 6, 3],
        activation: Activation::Tanh,
        seed: 9,
    })
    .unwrap();
    let batch = random_batch(&mut rng, 12, 4, 3);
    let run = || {
        let (_, g) = net.loss_and_grad(&batch).unwrap();
        net.sgd_step(&g, 0.05).unwrap()
    };
    let (a, da) = run();
    let (b, db) = run();
    assert_eq!(a, b);
    assert_eq!(da, db);
}

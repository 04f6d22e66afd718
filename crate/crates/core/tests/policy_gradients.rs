//! Finite-difference checks of the masked log-probability gradient and of
//! the saliency input gradient, plus masking properties.

mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vas_core::policy::masked_distribution;
use vas_core::task::SearchState;

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 100 {
        if let Some(case) = random_case(seed) {
            let err = log_prob_gradient_error(&case);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
            checked += 1;
        }
        seed += 1;
    }
}

#[test]
fn score_function_identity() {
    for seed in 0..20 {
        let Some(case) = random_case(seed) else {
            continue;
        };
        let enc = case.policy.prepare(&case.task).unwrap();
        let psi = case.policy.masked(&enc, &case.state).unwrap();
        let mut p = case.policy.clone();
        let mut total = vec![0.0; p.params().num_scalars()];
        for j in case.state.unqueried() {
            p.params_mut().zero_grads();
            p.log_prob_gradient(&case.task, &case.state, j).unwrap();
            for (t, g) in total.iter_mut().zip(p.params().flat_grads()) {
                *t += psi[j] * g;
            }
        }
        assert!(total.iter().all(|t| t.abs() < 1e-8), "seed {seed}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..30 {
        let Some(case) = random_case(seed) else {
            continue;
        };
        let grad = case
            .policy
            .input_gradient(&case.task, &case.state, case.chosen)
            .unwrap();
        let latent = case.policy.net().latent_map(&case.task).unwrap();
        let i = rng.random_range(0..latent.len());
        let prob = |x: f64| {
            let mut l = latent.clone();
            l[i] = x;
            let enc = case.policy.net().encode_latent(l).unwrap();
            let logits = case.policy.forward(&enc, &case.state).unwrap().logits;
            vas_numnet::softmax(&logits)[case.chosen]
        };
        let numeric = (prob(latent[i] + H) - prob(latent[i] - H)) / (2.0 * H);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-8);
        assert!(err < 1e-3, "seed {seed}: {} vs {numeric}", grad[i]);
    }
}

#[test]
fn saliency_sums_gradient_magnitudes_per_cell() {
    let case = (0..).find_map(random_case).unwrap();
    let grad = case
        .policy
        .input_gradient(&case.task, &case.state, case.chosen)
        .unwrap();
    let sal = case
        .policy
        .saliency(&case.task, &case.state, case.chosen)
        .unwrap();
    let total: f64 = grad.iter().map(|g| g.abs()).sum();
    assert!((sal.iter().sum::<f64>() - total).abs() < 1e-12);
    assert!(sal.iter().all(|&s| s >= 0.0));
}

fn psi_and_state() -> impl Strategy<Value = (Vec<f64>, Vec<i8>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(1e-6f64..1.0, n),
            prop::collection::vec(prop::sample::select(vec![-1i8, 0, 0, 1]), n),
        )
    })
}

fn to_state(obs: &[i8]) -> Option<SearchState> {
    let queried: Vec<usize> = obs
        .iter()
        .enumerate()
        .filter(|(_, &o)| o != 0)
        .map(|(j, _)| j)
        .collect();
    (queried.len() < obs.len()).then(|| SearchState::from_parts(obs.to_vec(), 1, queried).unwrap())
}

proptest! {
    #[test]
    fn masked_support_is_unqueried_set((raw, obs) in psi_and_state()) {
        let sum: f64 = raw.iter().sum();
        let psi: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        if let Some(state) = to_state(&obs) {
            let m = masked_distribution(&psi, &state).unwrap();
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (j, &p) in m.iter().enumerate() {
                prop_assert_eq!(p > 0.0, obs[j] == 0);
            }
        }
    }

    #[test]
    fn masking_is_scale_invariant((raw, obs) in psi_and_state(), scale in 1e-3f64..1e3) {
        if let Some(state) = to_state(&obs) {
            let scaled: Vec<f64> = raw.iter().map(|x| x * scale).collect();
            let a = masked_distribution(&raw, &state).unwrap();
            let b = masked_distribution(&scaled, &state).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

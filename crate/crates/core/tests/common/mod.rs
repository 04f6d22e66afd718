#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vas_core::policy::{masked_softmax, PolicyConfig, VasPolicy};
use vas_core::task::{self, initial_state, SearchState, Task};
use vas_core::train::{
    episode_gradient, finish_trace, Attribution, BaselineMode, EpisodeTrace, StepRecord,
};

pub fn random_task(
    rng: &mut ChaCha8Rng,
    (rows, cols): (usize, usize),
    d: usize,
    labels: Vec<u8>,
) -> Task {
    let features = (0..rows * cols * d)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Task::new("oracle", (rows, cols), d, features, labels).unwrap()
}

pub fn random_policy(
    rng: &mut ChaCha8Rng,
    (rows, cols): (usize, usize),
    d: usize,
    side: usize,
    budget: bool,
) -> VasPolicy {
    let mut cfg = PolicyConfig::for_grid((rows, cols), d);
    cfg.spatial_side = side;
    cfg.use_budget_channel = budget;
    VasPolicy::new(cfg, rng).unwrap()
}

/// Trace of a fixed query sequence, with the policy's ψ′ at each step.
pub fn trace_for(policy: &VasPolicy, task: &Task, cells: &[usize]) -> EpisodeTrace {
    let enc = policy.prepare(task).unwrap();
    let mut state = initial_state(task, cells.len()).unwrap();
    let mut steps = Vec::new();
    for (t, &cell) in cells.iter().enumerate() {
        let psi = masked_softmax(&policy.forward(&enc, &state).unwrap().logits, &state).unwrap();
        let (next, reward) = task::step(&state, task, cell).unwrap();
        steps.push(StepRecord {
            step: t,
            distribution: psi,
            cell,
            reward,
            remaining_budget: state.remaining_budget(),
        });
        state = next;
    }
    finish_trace(task, cells.len(), steps).unwrap()
}

/// Every ordered sequence of `k` distinct cells out of `n`.
pub fn sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for prefix in sequences(n, k - 1) {
        for c in 0..n {
            if !prefix.contains(&c) {
                let mut s = prefix.clone();
                s.push(c);
                out.push(s);
            }
        }
    }
    out
}

/// Probability of a sequence under the policy and its total reward.
pub fn sequence_prob_and_return(policy: &VasPolicy, task: &Task, cells: &[usize]) -> (f64, f64) {
    let trace = trace_for(policy, task, cells);
    let p = trace.steps.iter().map(|s| s.distribution[s.cell]).product();
    let r = trace.steps.iter().map(|s| f64::from(s.reward)).sum();
    (p, r)
}

/// Expected episode return by enumeration.
pub fn expected_return(policy: &VasPolicy, task: &Task, k: usize) -> f64 {
    sequences(task.n_cells(), k)
        .iter()
        .map(|s| {
            let (p, r) = sequence_prob_and_return(policy, task, s);
            p * r
        })
        .sum()
}

/// Central differences of the expected return over every parameter.
pub fn expected_return_gradient_fd(policy: &VasPolicy, task: &Task, k: usize, h: f64) -> Vec<f64> {
    let n = policy.params().num_scalars();
    let mut p = policy.clone();
    (0..n)
        .map(|i| {
            let orig = *p.params_mut().scalar_mut(i);
            *p.params_mut().scalar_mut(i) = orig + h;
            let up = expected_return(&p, task, k);
            *p.params_mut().scalar_mut(i) = orig - h;
            let down = expected_return(&p, task, k);
            *p.params_mut().scalar_mut(i) = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Exact expectation of the REINFORCE estimator: the per-sequence gradient
/// weighted by the sequence probability.
pub fn estimator_expectation(
    policy: &VasPolicy,
    task: &Task,
    k: usize,
    baseline: BaselineMode,
    attribution: Attribution,
) -> Vec<f64> {
    let mut p = policy.clone();
    let mut total = vec![0.0; p.params().num_scalars()];
    for cells in sequences(task.n_cells(), k) {
        let (prob, _) = sequence_prob_and_return(policy, task, &cells);
        let trace = trace_for(policy, task, &cells);
        p.params_mut().zero_grads();
        episode_gradient(&mut p, &trace, task, baseline, attribution).unwrap();
        for (t, g) in total.iter_mut().zip(p.params().flat_grads()) {
            *t += prob * g;
        }
    }
    total
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

pub fn oracle_instance(seed: u64) -> (VasPolicy, Task) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = random_task(&mut rng, (2, 2), 2, vec![1, 0, 1, 0]);
    let policy = random_policy(&mut rng, (2, 2), 2, 2, true);
    (policy, task)
}

/// Finite-difference step shared by the gradient checks.
pub const H: f64 = 1e-5;

pub fn random_state(rng: &mut ChaCha8Rng, n: usize) -> SearchState {
    let n_queried = rng.random_range(0..n);
    let mut cells: Vec<usize> = (0..n).collect();
    for i in 0..n_queried {
        let j = rng.random_range(i..n);
        cells.swap(i, j);
    }
    let queried = cells[..n_queried].to_vec();
    let mut obs = vec![0i8; n];
    for &c in &queried {
        obs[c] = if rng.random_bool(0.5) { 1 } else { -1 };
    }
    SearchState::from_parts(obs, rng.random_range(1..=n - n_queried), queried).unwrap()
}

/// Smallest |pre-activation| of the hidden layer, to skip ReLU kinks.
pub fn min_hidden_preactivation(policy: &VasPolicy, task: &Task, state: &SearchState) -> f64 {
    let enc = policy.prepare(task).unwrap();
    let act = policy.forward(&enc, state).unwrap();
    let params = policy.params();
    let w = params.value(params.find("fc1.weight").unwrap());
    let b = params.value(params.find("fc1.bias").unwrap());
    let width = act.fused.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| {
            (bi + w[i * width..(i + 1) * width]
                .iter()
                .zip(&act.fused)
                .map(|(x, y)| x * y)
                .sum::<f64>())
            .abs()
        })
        .fold(f64::INFINITY, f64::min)
}

pub struct Case {
    pub policy: VasPolicy,
    pub task: Task,
    pub state: SearchState,
    pub chosen: usize,
}

pub fn random_case(seed: u64) -> Option<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..=3);
    let cols = rng.random_range(2..=3);
    let n = rows * cols;
    let d = rng.random_range(1..=3);
    let side = rows.max(cols) + rng.random_range(0..=1);
    let labels = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    let task = random_task(&mut rng, (rows, cols), d, labels);
    let with_budget = rng.random_bool(0.5);
    let policy = random_policy(&mut rng, (rows, cols), d, side, with_budget);
    let state = random_state(&mut rng, n);
    let open: Vec<usize> = state.unqueried().collect();
    let chosen = open[rng.random_range(0..open.len())];
    (min_hidden_preactivation(&policy, &task, &state) > 1e-3).then_some(Case {
        policy,
        task,
        state,
        chosen,
    })
}

/// Worst relative error of the analytic `∇ log ψ′` over every parameter.
pub fn log_prob_gradient_error(case: &Case) -> f64 {
    let mut p = case.policy.clone();
    p.params_mut().zero_grads();
    p.log_prob_gradient(&case.task, &case.state, case.chosen)
        .unwrap();
    let analytic = p.params().flat_grads();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *p.params_mut().scalar_mut(i);
        *p.params_mut().scalar_mut(i) = orig + H;
        let up = p.log_prob(&case.task, &case.state, case.chosen).unwrap();
        *p.params_mut().scalar_mut(i) = orig - H;
        let down = p.log_prob(&case.task, &case.state, case.chosen).unwrap();
        *p.params_mut().scalar_mut(i) = orig;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

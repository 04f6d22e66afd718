//! Comparison policies: uniform random search and the two non-adaptive
//! greedy nets, which rank all cells once from the features alone.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vas_numnet::{
    binary_cross_entropy_with_logits, sigmoid, softmax, Adam, AdamConfig, ParamStore,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::TaskDataset;
use crate::error::{Result, VasError};
use crate::grid_net::{GridNet, GridNetConfig};
use crate::policy::{masked_distribution, masked_softmax, select_action, PolicyConfig, SelectMode};
use crate::task::{self, initial_state, SearchState, Task};
use crate::train::{
    check_finite, finish_trace, mean_esr, BaselineMode, EpisodeTrace, EpochLog, StepRecord,
    TrainConfig, TrainLog,
};

/// Uniform choice among the unqueried cells.
pub fn random_policy<R: Rng + ?Sized>(state: &SearchState, rng: &mut R) -> Result<usize> {
    let open: Vec<usize> = state.unqueried().collect();
    open.choose(rng).copied().ok_or(VasError::NoAction)
}

pub fn random_rollout<R: Rng + ?Sized>(task: &Task, k: usize, rng: &mut R) -> Result<EpisodeTrace> {
    let mut state = initial_state(task, k)?;
    let mut steps = Vec::with_capacity(k);
    for t in 0..k {
        let open = state.unqueried_count() as f64;
        let distribution = (0..task.n_cells())
            .map(|j| {
                if state.is_unqueried(j) {
                    1.0 / open
                } else {
                    0.0
                }
            })
            .collect();
        let cell = random_policy(&state, rng)?;
        let (next, reward) = task::step(&state, task, cell)?;
        steps.push(StepRecord {
            step: t,
            distribution,
            cell,
            reward,
            remaining_budget: state.remaining_budget(),
        });
        state = next;
    }
    finish_trace(task, k, steps)
}

/// The `k` highest-scoring cells, best first, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(VasError::InvalidBudget {
            k,
            n_cells: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GreedyKind {
    Classification,
    Selection,
}

impl GreedyKind {
    fn checkpoint_kind(self) -> &'static str {
        match self {
            GreedyKind::Classification => "greedy-classification",
            GreedyKind::Selection => "greedy-selection",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub kind: GreedyKind,
    pub n_cells: usize,
    pub latent_channels: usize,
    pub spatial_side: usize,
}

impl GreedyConfig {
    /// Same dimensions as a search policy.
    pub fn matching(kind: GreedyKind, policy: &PolicyConfig) -> Self {
        Self {
            kind,
            n_cells: policy.n_cells,
            latent_channels: policy.latent_channels,
            spatial_side: policy.spatial_side,
        }
    }

    fn net_config(&self) -> GridNetConfig {
        GridNetConfig {
            n_cells: self.n_cells,
            latent_channels: self.latent_channels,
            spatial_side: self.spatial_side,
            observation_channels: false,
            budget_channel: false,
            budget_normalizer: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyNet {
    config: GreedyConfig,
    net: GridNet,
}

impl GreedyNet {
    pub fn new<R: Rng + ?Sized>(config: GreedyConfig, rng: &mut R) -> Result<Self> {
        let mut net = GridNet::new(config.net_config(), rng)?;
        if config.kind == GreedyKind::Selection {
            net.zero_output_layer();
        }
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &GreedyConfig {
        &self.config
    }

    pub fn kind(&self) -> GreedyKind {
        self.config.kind
    }

    pub fn net(&self) -> &GridNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut GridNet {
        &mut self.net
    }

    pub fn params(&self) -> &ParamStore {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    pub fn logits(&self, task: &Task) -> Result<Vec<f64>> {
        let enc = self.net.encode_task(task)?;
        Ok(self.net.forward(&enc, &[], 0)?.logits)
    }

    /// Per-cell target probabilities (classification) or the selection
    /// distribution (selection).
    pub fn scores(&self, task: &Task) -> Result<Vec<f64>> {
        let logits = self.logits(task)?;
        Ok(match self.config.kind {
            GreedyKind::Classification => sigmoid(&logits),
            GreedyKind::Selection => softmax(&logits),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            self.config.kind.checkpoint_kind(),
            &self.config,
            self.params(),
        )
    }

    pub fn load(path: &Path, kind: GreedyKind) -> Result<Self> {
        let (config, params): (GreedyConfig, _) = load_checkpoint(path, kind.checkpoint_kind())?;
        let mut net = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.net.load_params(&params)?;
        Ok(net)
    }
}

/// The cells a greedy net would search with budget `k`, best first.
pub fn greedy_topk(net: &GreedyNet, task: &Task, k: usize) -> Result<Vec<usize>> {
    if k > task.n_cells() {
        return Err(VasError::InvalidBudget {
            k,
            n_cells: task.n_cells(),
        });
    }
    top_k(&net.scores(task)?, k)
}

/// Queries the greedy top-k in order. The recorded distribution at each step
/// is the net's scores renormalised over the unqueried cells.
pub fn greedy_rollout(net: &GreedyNet, task: &Task, k: usize) -> Result<EpisodeTrace> {
    let scores = net.scores(task)?;
    let cells = top_k(&scores, k)?;
    let mut state = initial_state(task, k)?;
    let mut steps = Vec::with_capacity(k);
    for (t, &cell) in cells.iter().enumerate() {
        let distribution = masked_distribution(&scores, &state)?;
        let (next, reward) = task::step(&state, task, cell)?;
        steps.push(StepRecord {
            step: t,
            distribution,
            cell,
            reward,
            remaining_budget: state.remaining_budget(),
        });
        state = next;
    }
    finish_trace(task, k, steps)
}

fn check_kind(net: &GreedyNet, kind: GreedyKind) -> Result<()> {
    if net.kind() != kind {
        return Err(VasError::Config(format!(
            "expected a {kind:?} net, got {:?}",
            net.kind()
        )));
    }
    Ok(())
}

fn step_or_restore(adam: &mut Adam, params: &mut ParamStore) -> Result<()> {
    let snapshot = params.clone();
    if let Err(e) = adam.step(params) {
        params.assign_from(&snapshot)?;
        return Err(e.into());
    }
    Ok(())
}

/// Minimises the mean per-cell binary cross-entropy against the labels.
/// The log reports the mean per-cell accuracy in place of utility and ESR.
pub fn train_greedy_classifier(
    net: &mut GreedyNet,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    check_kind(net, GreedyKind::Classification)?;
    if dataset.is_empty() {
        return Err(VasError::Config("training dataset is empty".into()));
    }
    cfg.validate(net.config.n_cells)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        net.params(),
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    net.params_mut().zero_grads();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let task = &dataset.tasks[i];
                let enc = net.net.encode_task(task)?;
                let act = net.net.forward(&enc, &[], 0)?;
                check_finite(&act.logits, "classifier logits", epoch)?;
                let labels: Vec<f64> = task.labels().iter().map(|&y| f64::from(y)).collect();
                let (loss, mut grad) = binary_cross_entropy_with_logits(&act.logits, &labels)?;
                loss_sum += loss;
                correct += act
                    .logits
                    .iter()
                    .zip(task.labels())
                    .filter(|(z, &y)| (**z > 0.0) == (y == 1))
                    .count();
                grad.iter_mut().for_each(|g| *g /= batch.len() as f64);
                let mut acc = net.net.new_encoding_grad();
                net.net.backward(&act, &[], 0, &grad, &mut acc)?;
                net.net.flush(&enc, &acc)?;
            }
            step_or_restore(&mut adam, net.params_mut())?;
        }
        let accuracy = correct as f64 / (dataset.len() * net.config.n_cells) as f64;
        log.epochs.push(EpochLog {
            epoch,
            mean_utility: loss_sum / dataset.len() as f64,
            mean_esr: accuracy,
            wall_ms: 0,
        });
    }
    Ok(log)
}

/// Draws `k` distinct cells by sequential renormalised sampling from the
/// selection distribution and returns them with the states before each draw.
fn draw_without_replacement<R: Rng + ?Sized>(
    logits: &[f64],
    task: &Task,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<SearchState>, Vec<usize>)> {
    let mut state = initial_state(task, k)?;
    let mut states = Vec::with_capacity(k);
    let mut cells = Vec::with_capacity(k);
    for _ in 0..k {
        let psi = masked_softmax(logits, &state)?;
        let cell = select_action(&psi, SelectMode::Sample, rng)?;
        let (next, _) = task::step(&state, task, cell)?;
        states.push(std::mem::replace(&mut state, next));
        cells.push(cell);
    }
    Ok((states, cells))
}

/// `∂/∂logits` of `Σ_i w_i log p(draw_i | earlier draws)`.
pub fn selection_logit_gradient(
    logits: &[f64],
    states: &[SearchState],
    cells: &[usize],
    weights: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; logits.len()];
    for ((state, &cell), &w) in states.iter().zip(cells).zip(weights) {
        let psi = masked_softmax(logits, state)?;
        for (g, p) in grad.iter_mut().zip(&psi) {
            *g -= w * p;
        }
        grad[cell] += w;
    }
    Ok(grad)
}

/// Per-draw weights: the draw's reward, minus the random-query baseline if set.
pub fn selection_weights(task: &Task, cells: &[usize], baseline: BaselineMode) -> Result<Vec<f64>> {
    let n = task.n_cells();
    let mut remaining = task.total_targets();
    let mut out = Vec::with_capacity(cells.len());
    for (t, &cell) in cells.iter().enumerate() {
        let r = f64::from(task::reward(task, cell)?);
        let b = match baseline {
            BaselineMode::None => 0.0,
            BaselineMode::RandomQuery => 2.0 * remaining as f64 / (n - t) as f64 - 1.0,
        };
        out.push(r - b);
        if r > 0.0 {
            remaining -= 1;
        }
    }
    Ok(out)
}

/// REINFORCE on one-shot selection of `k` cells per task.
pub fn train_greedy_selection(
    net: &mut GreedyNet,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    check_kind(net, GreedyKind::Selection)?;
    if dataset.is_empty() {
        return Err(VasError::Config("training dataset is empty".into()));
    }
    cfg.validate(net.config.n_cells)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        net.params(),
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    net.params_mut().zero_grads();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut traces = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            let scale = -1.0 / batch.len() as f64;
            let mut pending = Vec::with_capacity(batch.len());
            for &i in batch {
                let task = &dataset.tasks[i];
                let k = cfg.budget.sample(&mut rng);
                let enc = net.net.encode_task(task)?;
                let act = net.net.forward(&enc, &[], 0)?;
                check_finite(&act.logits, "selection logits", epoch)?;
                let (states, cells) = draw_without_replacement(&act.logits, task, k, &mut rng)?;
                let weights = selection_weights(task, &cells, cfg.baseline)?;
                let mut grad = selection_logit_gradient(&act.logits, &states, &cells, &weights)?;
                grad.iter_mut().for_each(|g| *g *= scale);
                let steps = cells
                    .iter()
                    .enumerate()
                    .map(|(t, &cell)| {
                        Ok(StepRecord {
                            step: t,
                            distribution: masked_softmax(&act.logits, &states[t])?,
                            cell,
                            reward: task::reward(task, cell)?,
                            remaining_budget: k - t,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                traces.push(finish_trace(task, k, steps)?);
                pending.push((enc, act, grad));
            }
            for (enc, act, grad) in pending {
                let mut acc = net.net.new_encoding_grad();
                net.net.backward(&act, &[], 0, &grad, &mut acc)?;
                net.net.flush(&enc, &acc)?;
            }
            step_or_restore(&mut adam, net.params_mut())?;
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_utility: traces.iter().map(|t| t.utility as f64).sum::<f64>()
                / traces.len() as f64,
            mean_esr: mean_esr(&traces),
            wall_ms: 0,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Provenance, Split};

    fn state(obs: &[i8]) -> SearchState {
        let queried = obs
            .iter()
            .enumerate()
            .filter(|(_, &o)| o != 0)
            .map(|(j, _)| j)
            .collect();
        SearchState::from_parts(obs.to_vec(), 1, queried).unwrap()
    }

    #[test]
    fn random_policy_is_uniform_over_open_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = state(&[0, -1, 0]);
        let draws = 100_000;
        let zeros = (0..draws)
            .filter(|_| random_policy(&s, &mut rng).unwrap() == 0)
            .count();
        assert!((zeros as f64 / draws as f64 - 0.5).abs() < 0.01);
        assert_eq!(random_policy(&state(&[1, 0, -1]), &mut rng).unwrap(), 1);
        assert!(matches!(
            random_policy(&state(&[1, 1, -1]), &mut rng),
            Err(VasError::NoAction)
        ));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&[0.5, 0.5], 1).unwrap(), vec![0]);
        let mut all = top_k(&[0.3, 0.1, 0.2, 0.4], 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(
            top_k(&[0.1], 2),
            Err(VasError::InvalidBudget { .. })
        ));
    }

    fn net(kind: GreedyKind, seed: u64) -> GreedyNet {
        let config = GreedyConfig {
            kind,
            n_cells: 4,
            latent_channels: 2,
            spatial_side: 2,
        };
        GreedyNet::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn task(labels: Vec<u8>, seed: u64) -> Task {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Task::new(format!("t{seed}"), (2, 2), 2, features, labels).unwrap()
    }

    #[test]
    fn greedy_rollout_is_non_adaptive() {
        let n = net(GreedyKind::Selection, 1);
        let t = task(vec![0, 1, 1, 0], 2);
        let a = greedy_rollout(&n, &t, 3).unwrap();
        assert_eq!(a.cells(), greedy_topk(&n, &t, 3).unwrap());
        assert_eq!(a, greedy_rollout(&n, &t, 3).unwrap());
        assert!(greedy_topk(&n, &t, 5).is_err());
    }

    #[test]
    fn all_negative_classifier_drifts_to_zero() {
        let tasks = (0..8).map(|i| task(vec![0; 4], i)).collect();
        let ds =
            TaskDataset::new(tasks, Split::Train, Provenance::Synthetic, String::new()).unwrap();
        let mut n = net(GreedyKind::Classification, 3);
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 4,
            learning_rate: 1e-2,
            budget: crate::task::BudgetSpec::Fixed { k: 2 },
            ..TrainConfig::default()
        };
        train_greedy_classifier(&mut n, &ds, &cfg).unwrap();
        let mean: f64 = ds
            .tasks
            .iter()
            .map(|t| n.scores(t).unwrap().iter().sum::<f64>() / 4.0)
            .sum::<f64>()
            / 8.0;
        assert!(mean < 0.1, "mean sigmoid {mean}");
    }

    #[test]
    fn kind_mismatch_rejected() {
        let mut n = net(GreedyKind::Selection, 4);
        let ds = TaskDataset::new(
            vec![task(vec![0, 1, 0, 0], 5)],
            Split::Train,
            Provenance::Synthetic,
            String::new(),
        )
        .unwrap();
        assert!(train_greedy_classifier(&mut n, &ds, &TrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let n = net(GreedyKind::Classification, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gc.vasp");
        n.save(&path).unwrap();
        assert_eq!(
            GreedyNet::load(&path, GreedyKind::Classification).unwrap(),
            n
        );
        assert!(GreedyNet::load(&path, GreedyKind::Selection).is_err());
    }
}

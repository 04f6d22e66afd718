//! Episode rollouts and REINFORCE training.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vas_numnet::{Adam, AdamConfig, NetError};

use crate::dataset::TaskDataset;
use crate::error::{Result, VasError};
use crate::grid_net::{Encoding, StepActivations};
use crate::policy::{masked_softmax, select_action, SelectMode, VasPolicy};
use crate::recon::ReconHead;
use crate::task::{self, initial_state, BudgetSpec, SearchState, Task};

/// What each step's log-probability is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    None,
    /// Expected reward of a uniformly random unqueried cell, from the labels.
    #[default]
    RandomQuery,
}

/// Which rewards weight a step's log-probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribution {
    #[default]
    Immediate,
    RewardToGo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub budget: BudgetSpec,
    pub baseline: BaselineMode,
    pub attribution: Attribution,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Fill the `wall_ms` log column; when off it is written as 0.
    pub record_timing: bool,
    /// Weight of the reconstruction loss when a reconstruction head is trained jointly.
    pub recon_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 16,
            learning_rate: 1e-4,
            budget: BudgetSpec::default(),
            baseline: BaselineMode::default(),
            attribution: Attribution::default(),
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            record_timing: false,
            recon_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VasError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(VasError::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(VasError::Config(
                "checkpoint_every is set without checkpoint_path".into(),
            ));
        }
        if !(self.recon_weight.is_finite() && self.recon_weight >= 0.0) {
            return Err(VasError::Config(format!(
                "recon_weight {} must be non-negative",
                self.recon_weight
            )));
        }
        self.budget.validate(n_cells)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// ψ′ at the time of the query.
    pub distribution: Vec<f64>,
    pub cell: usize,
    pub reward: i8,
    /// Budget left before this query.
    pub remaining_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task_id: String,
    pub budget: usize,
    pub total_targets: usize,
    pub steps: Vec<StepRecord>,
    pub utility: usize,
    pub esr: f64,
}

impl EpisodeTrace {
    pub fn cells(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.cell).collect()
    }

    pub fn rewards(&self) -> Vec<i8> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Whether the task contributes to ESR averages.
    pub fn counts_for_esr(&self) -> bool {
        self.total_targets > 0
    }

    /// Search states before each step.
    pub fn states(&self, n_cells: usize) -> Result<Vec<SearchState>> {
        let mut state = SearchState::from_parts(vec![0; n_cells], self.budget, Vec::new())?;
        let mut states = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let next = state.with_outcome(s.cell, s.reward)?;
            states.push(state);
            state = next;
        }
        Ok(states)
    }
}

/// A rollout plus what the backward pass needs.
pub(crate) struct EpisodeRun {
    pub trace: EpisodeTrace,
    pub enc: Encoding,
    pub acts: Vec<StepActivations>,
    pub states: Vec<SearchState>,
}

pub(crate) fn check_finite(values: &[f64], what: &str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(VasError::Net(NetError::Numeric {
            param: what.to_string(),
            step: step as u64,
        }))
    }
}

/// Completes a trace from its steps: utility and ESR are recomputed from the rewards.
pub fn finish_trace(task: &Task, budget: usize, steps: Vec<StepRecord>) -> Result<EpisodeTrace> {
    let rewards: Vec<i8> = steps.iter().map(|s| s.reward).collect();
    let utility = task::episode_utility(&rewards);
    Ok(EpisodeTrace {
        task_id: task.id().to_string(),
        budget,
        total_targets: task.total_targets(),
        esr: task::esr(utility, task.total_targets(), budget)?,
        utility,
        steps,
    })
}

pub(crate) fn run_episode<R: Rng + ?Sized>(
    policy: &VasPolicy,
    task: &Task,
    k: usize,
    mode: SelectMode,
    rng: &mut R,
) -> Result<EpisodeRun> {
    let enc = policy.prepare(task)?;
    let mut state = initial_state(task, k)?;
    let mut acts = Vec::with_capacity(k);
    let mut states = Vec::with_capacity(k);
    let mut steps = Vec::with_capacity(k);
    for t in 0..k {
        let act = policy.forward(&enc, &state)?;
        check_finite(&act.logits, "policy logits", t)?;
        let psi = masked_softmax(&act.logits, &state)?;
        let cell = select_action(&psi, mode, rng)?;
        let (next, reward) = task::step(&state, task, cell)?;
        steps.push(StepRecord {
            step: t,
            distribution: psi,
            cell,
            reward,
            remaining_budget: state.remaining_budget(),
        });
        acts.push(act);
        states.push(std::mem::replace(&mut state, next));
    }
    Ok(EpisodeRun {
        trace: finish_trace(task, k, steps)?,
        enc,
        acts,
        states,
    })
}

/// Runs one `k`-step search and records every step.
pub fn rollout<R: Rng + ?Sized>(
    policy: &VasPolicy,
    task: &Task,
    k: usize,
    mode: SelectMode,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    Ok(run_episode(policy, task, k, mode, rng)?.trace)
}

/// Per-step weights `G_t` of the score-function estimator.
pub fn advantages(
    trace: &EpisodeTrace,
    task: &Task,
    baseline: BaselineMode,
    attribution: Attribution,
) -> Result<Vec<f64>> {
    let n = task.n_cells();
    let mut remaining_targets = task.total_targets();
    let mut out = Vec::with_capacity(trace.steps.len());
    let rewards: Vec<f64> = trace.steps.iter().map(|s| f64::from(s.reward)).collect();
    for (t, s) in trace.steps.iter().enumerate() {
        let unqueried = n - t;
        // Expected reward of a uniformly random unqueried cell.
        let random_reward = 2.0 * remaining_targets as f64 / unqueried as f64 - 1.0;
        let (ret, base) = match attribution {
            Attribution::Immediate => (rewards[t], random_reward),
            Attribution::RewardToGo => (
                rewards[t..].iter().sum::<f64>(),
                random_reward * (trace.steps.len() - t) as f64,
            ),
        };
        out.push(match baseline {
            BaselineMode::None => ret,
            BaselineMode::RandomQuery => ret - base,
        });
        if s.reward == 1 {
            remaining_targets -= 1;
        }
    }
    Ok(out)
}

fn check_trace(trace: &EpisodeTrace, task: &Task) -> Result<()> {
    if trace.task_id != task.id() {
        return Err(VasError::Contract(format!(
            "trace belongs to task {}, not {}",
            trace.task_id,
            task.id()
        )));
    }
    for s in &trace.steps {
        if task::reward(task, s.cell)? != s.reward {
            return Err(VasError::Contract(format!(
                "trace reward at step {} disagrees with the task labels",
                s.step
            )));
        }
    }
    Ok(())
}

/// Adds `Σ_t scale · G_t · ∇θ log ψ′_{a_t}` to the gradients.
pub(crate) fn accumulate_run(
    policy: &mut VasPolicy,
    run: &EpisodeRun,
    weights: &[f64],
    scale: f64,
) -> Result<()> {
    let mut acc = policy.new_encoding_grad();
    for (((act, state), s), &w) in run
        .acts
        .iter()
        .zip(&run.states)
        .zip(&run.trace.steps)
        .zip(weights)
    {
        if w != 0.0 {
            policy.accumulate_log_prob(act, state, s.cell, scale * w, &mut acc)?;
        }
    }
    if !acc.is_zero() {
        policy.flush(&run.enc, &acc)?;
    }
    Ok(())
}

/// Accumulates the REINFORCE gradient of one recorded episode,
/// `Σ_t G_t · ∇θ log ψ′_{a_t}`.
///
/// The trace must come from the current parameters; the recorded ψ′ are
/// checked against a fresh forward pass.
pub fn episode_gradient(
    policy: &mut VasPolicy,
    trace: &EpisodeTrace,
    task: &Task,
    baseline: BaselineMode,
    attribution: Attribution,
) -> Result<()> {
    check_trace(trace, task)?;
    let enc = policy.prepare(task)?;
    let states = trace.states(task.n_cells())?;
    let mut acts = Vec::with_capacity(states.len());
    for (state, s) in states.iter().zip(&trace.steps) {
        let act = policy.forward(&enc, state)?;
        let psi = masked_softmax(&act.logits, state)?;
        let drift = psi
            .iter()
            .zip(&s.distribution)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift > 1e-9 {
            return Err(VasError::Contract(format!(
                "trace step {} was not produced by these parameters (ψ′ differs by {drift:e})",
                s.step
            )));
        }
        acts.push(act);
    }
    let weights = advantages(trace, task, baseline, attribution)?;
    let run = EpisodeRun {
        trace: trace.clone(),
        enc,
        acts,
        states,
    };
    accumulate_run(policy, &run, &weights, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_utility: f64,
    pub mean_esr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_utility,mean_esr,wall_ms\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{}",
                e.epoch, e.mean_utility, e.mean_esr, e.wall_ms
            )
            .unwrap();
        }
        out
    }
}

/// Mean ESR over traces of tasks that have at least one target.
pub fn mean_esr<'a>(traces: impl IntoIterator<Item = &'a EpisodeTrace>) -> f64 {
    let (sum, n) = traces
        .into_iter()
        .filter(|t| t.counts_for_esr())
        .fold((0.0, 0usize), |(s, n), t| (s + t.esr, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains `policy` in place. On a numerical failure the parameters from
/// before the failing update are kept and the error is returned.
pub fn train(policy: &mut VasPolicy, dataset: &TaskDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_progress(policy, dataset, cfg, |_| {})
}

pub fn train_with_progress(
    policy: &mut VasPolicy,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    train_inner(policy, None, dataset, cfg, on_epoch)
}

/// Trains the policy together with a reconstruction head, adding
/// `recon_weight` times the reconstruction loss to the objective.
pub fn train_with_recon(
    policy: &mut VasPolicy,
    recon: &mut ReconHead,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    train_inner(policy, Some(recon), dataset, cfg, on_epoch)
}

fn train_inner(
    policy: &mut VasPolicy,
    mut recon: Option<&mut ReconHead>,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(VasError::Config("training dataset is empty".into()));
    }
    cfg.validate(policy.config().n_cells)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        policy.params(),
    );
    let mut recon_adam = recon.as_deref().map(|r| {
        Adam::new(
            AdamConfig::with_learning_rate(cfg.learning_rate),
            r.params(),
        )
    });
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    policy.params_mut().zero_grads();
    if let Some(r) = recon.as_deref_mut() {
        r.params_mut().zero_grads();
    }

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut traces = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            let scale = -1.0 / batch.len() as f64;
            let mut runs = Vec::with_capacity(batch.len());
            for &i in batch {
                let task = &dataset.tasks[i];
                let k = cfg.budget.sample(&mut rng);
                runs.push((
                    i,
                    run_episode(policy, task, k, SelectMode::Sample, &mut rng)?,
                ));
            }
            for (i, run) in &runs {
                let weights = advantages(
                    &run.trace,
                    &dataset.tasks[*i],
                    cfg.baseline,
                    cfg.attribution,
                )?;
                accumulate_run(policy, run, &weights, scale)?;
                if let Some(r) = recon.as_deref_mut() {
                    r.backward(
                        policy.net_mut(),
                        &run.enc,
                        cfg.recon_weight / batch.len() as f64,
                    )?;
                }
            }
            let snapshot = policy.params().clone();
            if let Err(e) = adam.step(policy.params_mut()) {
                policy.params_mut().assign_from(&snapshot)?;
                return Err(e.into());
            }
            if let (Some(r), Some(ra)) = (recon.as_deref_mut(), recon_adam.as_mut()) {
                if let Err(e) = ra.step(r.params_mut()) {
                    policy.params_mut().assign_from(&snapshot)?;
                    return Err(e.into());
                }
            }
            if policy
                .params()
                .params()
                .iter()
                .any(|p| !p.value.is_finite())
            {
                policy.params_mut().assign_from(&snapshot)?;
                return Err(VasError::Net(NetError::Numeric {
                    param: "updated parameters".into(),
                    step: adam.steps_taken(),
                }));
            }
            traces.extend(runs.into_iter().map(|(_, r)| r.trace));
        }
        let entry = EpochLog {
            epoch,
            mean_utility: traces.iter().map(|t| t.utility as f64).sum::<f64>()
                / traces.len() as f64,
            mean_esr: mean_esr(&traces),
            wall_ms: if cfg.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                policy.save(path)?;
            }
        }
    }
    Ok(log)
}

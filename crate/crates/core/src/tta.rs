//! Test-time adaptation: updating the policy while it searches.
//!
//! A [`TtaSession`] owns the trained parameters, the working copy being
//! adapted and the optimiser state. Online and stepwise adaptation keep their
//! changes across the task stream; FixMatch and TTT start every task from the
//! trained parameters unless `persist` says otherwise.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vas_numnet::{cross_entropy, softmax, Adam, AdamConfig};

use crate::error::{Result, VasError};
use crate::policy::{masked_softmax, select_action, SelectMode, VasPolicy};
use crate::recon::ReconHead;
use crate::task::{self, initial_state, SearchState, Task};
use crate::train::{check_finite, finish_trace, EpisodeTrace, StepRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtaMode {
    #[default]
    None,
    Online,
    Stepwise,
    Fixmatch,
    Ttt,
}

impl TtaMode {
    pub const ALL: [TtaMode; 5] = [
        TtaMode::None,
        TtaMode::Online,
        TtaMode::Stepwise,
        TtaMode::Fixmatch,
        TtaMode::Ttt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TtaMode::None => "none",
            TtaMode::Online => "online",
            TtaMode::Stepwise => "stepwise",
            TtaMode::Fixmatch => "fixmatch",
            TtaMode::Ttt => "ttt",
        }
    }

    /// Whether adapted parameters carry over to the next task by default.
    pub fn persists_by_default(self) -> bool {
        matches!(self, TtaMode::Online | TtaMode::Stepwise)
    }
}

impl FromStr for TtaMode {
    type Err = VasError;

    fn from_str(s: &str) -> Result<Self> {
        if s.contains(['+', ',']) {
            return Err(VasError::Config(format!(
                "combined adaptation modes are not supported: {s}"
            )));
        }
        TtaMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| VasError::Config(format!("unknown adaptation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub mode: TtaMode,
    pub learning_rate: f64,
    pub stepwise_m: usize,
    pub fixmatch_noise_std: f64,
    pub ttt_pre_steps: usize,
    /// Overrides the mode's default parameter persistence across tasks.
    pub persist: Option<bool>,
    pub select: SelectMode,
    /// Seeds the FixMatch feature noise.
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            mode: TtaMode::None,
            learning_rate: 1e-5,
            stepwise_m: 5,
            fixmatch_noise_std: 0.1,
            ttt_pre_steps: 5,
            persist: None,
            select: SelectMode::Argmax,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn with_mode(mode: TtaMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(VasError::Config(format!(
                "adaptation learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if self.stepwise_m == 0 {
            return Err(VasError::Config("stepwise_m must be at least 1".into()));
        }
        if !(self.fixmatch_noise_std.is_finite() && self.fixmatch_noise_std >= 0.0) {
            return Err(VasError::Config(format!(
                "fixmatch_noise_std {} must be non-negative",
                self.fixmatch_noise_std
            )));
        }
        Ok(())
    }

    pub fn persists(&self) -> bool {
        self.persist.unwrap_or(self.mode.persists_by_default())
    }
}

/// Cross-entropy target built from one query outcome: the queried cell on a
/// hit, otherwise uniform over the cells still unqueried after the query.
/// `None` when a miss leaves nothing unqueried.
pub fn fixmatch_target(
    state_before: &SearchState,
    cell: usize,
    outcome: i8,
) -> Result<Option<Vec<f64>>> {
    let n = state_before.n_cells();
    if cell >= n {
        return Err(VasError::InvalidCell { cell, n_cells: n });
    }
    match outcome {
        1 => {
            let mut t = vec![0.0; n];
            t[cell] = 1.0;
            Ok(Some(t))
        }
        -1 => {
            let open: Vec<usize> = state_before.unqueried().filter(|&j| j != cell).collect();
            if open.is_empty() {
                return Ok(None);
            }
            let mut t = vec![0.0; n];
            let p = 1.0 / open.len() as f64;
            for j in open {
                t[j] = p;
            }
            Ok(Some(t))
        }
        other => Err(VasError::Contract(format!(
            "query outcome must be +1 or -1, got {other}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaOutcome {
    pub trace: EpisodeTrace,
    pub n_updates: usize,
}

pub struct TtaSession {
    cfg: TtaConfig,
    trained: VasPolicy,
    trained_recon: Option<ReconHead>,
    policy: VasPolicy,
    recon: Option<ReconHead>,
    adam: Adam,
    recon_adam: Option<Adam>,
    noise_rng: ChaCha8Rng,
}

impl TtaSession {
    /// TTT needs the reconstruction head trained with the policy.
    pub fn new(policy: VasPolicy, recon: Option<ReconHead>, cfg: TtaConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == TtaMode::Ttt && recon.is_none() {
            return Err(VasError::Config(
                "ttt adaptation needs a reconstruction head".into(),
            ));
        }
        let adam = Adam::new(
            AdamConfig::with_learning_rate(cfg.learning_rate),
            policy.params(),
        );
        let recon_adam = recon.as_ref().map(|r| {
            Adam::new(
                AdamConfig::with_learning_rate(cfg.learning_rate),
                r.params(),
            )
        });
        Ok(Self {
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            trained: policy.clone(),
            trained_recon: recon.clone(),
            policy,
            recon,
            adam,
            recon_adam,
            cfg,
        })
    }

    pub fn config(&self) -> &TtaConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &VasPolicy {
        &self.policy
    }

    pub fn recon(&self) -> Option<&ReconHead> {
        self.recon.as_ref()
    }

    /// Back to the trained parameters with fresh optimiser state.
    pub fn reset(&mut self) {
        self.policy = self.trained.clone();
        self.recon = self.trained_recon.clone();
        self.adam = Adam::new(
            AdamConfig::with_learning_rate(self.cfg.learning_rate),
            self.policy.params(),
        );
        self.recon_adam = self.recon.as_ref().map(|r| {
            Adam::new(
                AdamConfig::with_learning_rate(self.cfg.learning_rate),
                r.params(),
            )
        });
    }

    fn step_policy(&mut self) -> Result<()> {
        let snapshot = self.policy.params().clone();
        if let Err(e) = self.adam.step(self.policy.params_mut()) {
            self.policy.params_mut().assign_from(&snapshot)?;
            return Err(e.into());
        }
        Ok(())
    }

    /// One REINFORCE ascent step on `Σ r_t log ψ′_{a_t}` over the given steps,
    /// with no baseline.
    fn reinforce(
        &mut self,
        task: &Task,
        states: &[SearchState],
        steps: &[StepRecord],
    ) -> Result<()> {
        if steps.is_empty() || states.len() != steps.len() {
            return Err(VasError::Contract(
                "an adaptation update needs at least one completed step".into(),
            ));
        }
        let enc = self.policy.prepare(task)?;
        let mut acc = self.policy.new_encoding_grad();
        for (state, s) in states.iter().zip(steps) {
            let act = self.policy.forward(&enc, state)?;
            self.policy
                .accumulate_log_prob(&act, state, s.cell, -f64::from(s.reward), &mut acc)?;
        }
        self.policy.flush(&enc, &acc)?;
        self.step_policy()
    }

    /// End-of-task update from a completed trace.
    pub fn online_update(&mut self, trace: &EpisodeTrace, task: &Task) -> Result<()> {
        let states = trace.states(task.n_cells())?;
        self.reinforce(task, &states, &trace.steps)
    }

    /// Update from the most recent steps of a task in progress.
    pub fn stepwise_update(
        &mut self,
        task: &Task,
        states: &[SearchState],
        steps: &[StepRecord],
    ) -> Result<()> {
        self.reinforce(task, states, steps)
    }

    /// Cross-entropy step towards the outcome-derived target, with ψ taken on
    /// noise-perturbed features. Returns whether an update was made.
    pub fn fixmatch_update(
        &mut self,
        task: &Task,
        state_before: &SearchState,
        cell: usize,
        outcome: i8,
    ) -> Result<bool> {
        let Some(target) = fixmatch_target(state_before, cell, outcome)? else {
            return Ok(false);
        };
        let noise = Normal::new(0.0, self.cfg.fixmatch_noise_std)
            .map_err(|e| VasError::Config(format!("fixmatch noise: {e}")))?;
        let noisy: Vec<f64> = task
            .features()
            .iter()
            .map(|x| x + noise.sample(&mut self.noise_rng))
            .collect();
        let augmented = task.with_features(noisy)?;
        let enc = self.policy.prepare(&augmented)?;
        let act = self.policy.forward(&enc, state_before)?;
        let psi = softmax(&act.logits);
        let (_, grad) = cross_entropy(&psi, &target)?;
        let mut acc = self.policy.new_encoding_grad();
        self.policy.net_mut().backward(
            &act,
            &state_before.observation_values(),
            state_before.remaining_budget(),
            &grad,
            &mut acc,
        )?;
        self.policy.flush(&enc, &acc)?;
        self.step_policy()?;
        Ok(true)
    }

    /// Reconstruction-loss steps on the task's features, updating only the
    /// projection and the reconstruction head.
    pub fn ttt_adapt(&mut self, task: &Task) -> Result<()> {
        let (Some(recon), Some(recon_adam)) = (self.recon.as_mut(), self.recon_adam.as_mut())
        else {
            return Err(VasError::Config(
                "ttt adaptation needs a reconstruction head".into(),
            ));
        };
        let projection = self.policy.net().projection_params();
        for _ in 0..self.cfg.ttt_pre_steps {
            let enc = self.policy.prepare(task)?;
            recon.backward(self.policy.net_mut(), &enc, 1.0)?;
            let snapshot = self.policy.params().clone();
            let head_snapshot = recon.params().clone();
            let result = self
                .adam
                .step_only(self.policy.params_mut(), &projection)
                .and_then(|()| recon_adam.step(recon.params_mut()));
            if let Err(e) = result {
                self.policy.params_mut().assign_from(&snapshot)?;
                recon.params_mut().assign_from(&head_snapshot)?;
                return Err(e.into());
            }
        }
        Ok(())
    }

    /// Searches one task with `k` queries, adapting as configured.
    pub fn search<R: Rng + ?Sized>(
        &mut self,
        task: &Task,
        k: usize,
        rng: &mut R,
    ) -> Result<TtaOutcome> {
        let mode = self.cfg.mode;
        if mode == TtaMode::Stepwise && self.cfg.stepwise_m > k {
            return Err(VasError::Config(format!(
                "stepwise period {} exceeds the budget {k}",
                self.cfg.stepwise_m
            )));
        }
        if !self.cfg.persists() {
            self.reset();
        }
        let mut n_updates = 0;
        if mode == TtaMode::Ttt {
            self.ttt_adapt(task)?;
            n_updates += self.cfg.ttt_pre_steps;
        }
        let mut state = initial_state(task, k)?;
        let mut states = Vec::with_capacity(k);
        let mut steps = Vec::with_capacity(k);
        let mut enc = self.policy.prepare(task)?;
        for t in 0..k {
            let act = self.policy.forward(&enc, &state)?;
            check_finite(&act.logits, "policy logits", t)?;
            let psi = masked_softmax(&act.logits, &state)?;
            let cell = select_action(&psi, self.cfg.select, rng)?;
            let (next, reward) = task::step(&state, task, cell)?;
            steps.push(StepRecord {
                step: t,
                distribution: psi,
                cell,
                reward,
                remaining_budget: state.remaining_budget(),
            });
            states.push(state.clone());
            let mut updated = false;
            match mode {
                TtaMode::Fixmatch => updated = self.fixmatch_update(task, &state, cell, reward)?,
                TtaMode::Stepwise if (t + 1) % self.cfg.stepwise_m == 0 => {
                    let from = t + 1 - self.cfg.stepwise_m;
                    self.stepwise_update(task, &states[from..], &steps[from..])?;
                    updated = true;
                }
                _ => {}
            }
            if updated {
                n_updates += 1;
                enc = self.policy.prepare(task)?;
            }
            state = next;
        }
        let trace = finish_trace(task, k, steps)?;
        if mode == TtaMode::Online {
            self.online_update(&trace, task)?;
            n_updates += 1;
        }
        Ok(TtaOutcome { trace, n_updates })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaRecord {
    pub task_id: String,
    pub mode: TtaMode,
    pub k: usize,
    pub utility: usize,
    pub esr: f64,
    pub n_updates: usize,
}

impl TtaRecord {
    pub fn new(mode: TtaMode, outcome: &TtaOutcome) -> Self {
        Self {
            task_id: outcome.trace.task_id.clone(),
            mode,
            k: outcome.trace.budget,
            utility: outcome.trace.utility,
            esr: outcome.trace.esr,
            n_updates: outcome.n_updates,
        }
    }
}

pub fn tta_report_csv(records: &[TtaRecord]) -> String {
    let mut out = String::from("task_id,mode,K,utility,esr,n_updates\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.task_id,
            r.mode.name(),
            r.k,
            r.utility,
            r.esr,
            r.n_updates
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(obs: &[i8]) -> SearchState {
        let queried = obs
            .iter()
            .enumerate()
            .filter(|(_, &o)| o != 0)
            .map(|(j, _)| j)
            .collect();
        SearchState::from_parts(obs.to_vec(), 3, queried).unwrap()
    }

    #[test]
    fn fixmatch_examples() {
        assert_eq!(
            fixmatch_target(&state(&[0; 6]), 4, 1).unwrap().unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(
            fixmatch_target(&state(&[-1, 0, 0, 0]), 1, -1)
                .unwrap()
                .unwrap(),
            vec![0.0, 0.0, 0.5, 0.5]
        );
        assert_eq!(fixmatch_target(&state(&[-1, 1, 0]), 2, -1).unwrap(), None);
        assert!(fixmatch_target(&state(&[0, 0]), 0, 0).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("online".parse::<TtaMode>().unwrap(), TtaMode::Online);
        assert!("online+ttt".parse::<TtaMode>().is_err());
        assert!("sideways".parse::<TtaMode>().is_err());
    }

    #[test]
    fn persistence_defaults() {
        assert!(TtaConfig::with_mode(TtaMode::Online).persists());
        assert!(TtaConfig::with_mode(TtaMode::Stepwise).persists());
        assert!(!TtaConfig::with_mode(TtaMode::Fixmatch).persists());
        assert!(!TtaConfig::with_mode(TtaMode::Ttt).persists());
        let forced = TtaConfig {
            persist: Some(true),
            ..TtaConfig::with_mode(TtaMode::Ttt)
        };
        assert!(forced.persists());
    }

    #[test]
    fn report_header() {
        assert!(tta_report_csv(&[]).starts_with("task_id,mode,K,utility,esr,n_updates"));
    }
}

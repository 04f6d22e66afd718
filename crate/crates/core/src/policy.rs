//! The search policy: a [`GridNet`] fed with observations and the remaining
//! budget, plus masking and action selection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vas_numnet::{softmax, ParamStore};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Result, VasError};
use crate::grid_net::{Encoding, EncodingGrad, GridNet, GridNetConfig, StepActivations};
use crate::task::{SearchState, Task};

pub const DEFAULT_LATENT_SIDE: usize = 7;
const CHECKPOINT_KIND: &str = "vas-policy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub n_cells: usize,
    pub latent_channels: usize,
    pub spatial_side: usize,
    #[serde(default = "default_true")]
    pub use_budget_channel: bool,
    /// Divisor applied to the remaining budget before tiling.
    pub budget_normalizer: f64,
}

fn default_true() -> bool {
    true
}

impl PolicyConfig {
    /// Defaults for a grid: side 7 (or the grid's larger side, if bigger) and
    /// the budget normalised by `N`.
    pub fn for_grid((rows, cols): (usize, usize), latent_channels: usize) -> Self {
        let n_cells = rows * cols;
        Self {
            n_cells,
            latent_channels,
            spatial_side: DEFAULT_LATENT_SIDE.max(rows).max(cols),
            use_budget_channel: true,
            budget_normalizer: n_cells as f64,
        }
    }

    pub fn without_budget_channel(mut self) -> Self {
        self.use_budget_channel = false;
        self
    }

    pub fn net_config(&self) -> GridNetConfig {
        GridNetConfig {
            n_cells: self.n_cells,
            latent_channels: self.latent_channels,
            spatial_side: self.spatial_side,
            observation_channels: true,
            budget_channel: self.use_budget_channel,
            budget_normalizer: self.budget_normalizer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    Sample,
    Argmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VasPolicy {
    config: PolicyConfig,
    net: GridNet,
}

impl VasPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        let net = GridNet::new(config.net_config(), rng)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
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

    fn check_state(&self, state: &SearchState) -> Result<()> {
        if state.n_cells() != self.config.n_cells {
            return Err(VasError::Config(format!(
                "policy has {} cells, state has {}",
                self.config.n_cells,
                state.n_cells()
            )));
        }
        Ok(())
    }

    /// The fused input map the head consumes.
    pub fn encode(&self, latent: &[f64], state: &SearchState) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.net.fused_input(
            latent,
            &state.observation_values(),
            state.remaining_budget(),
        )
    }

    /// Per-task cache; valid until the parameters change.
    pub fn prepare(&self, task: &Task) -> Result<Encoding> {
        self.net.encode_task(task)
    }

    pub fn forward(&self, enc: &Encoding, state: &SearchState) -> Result<StepActivations> {
        self.check_state(state)?;
        self.net
            .forward(enc, &state.observation_values(), state.remaining_budget())
    }

    /// ψ over all cells.
    pub fn distribution(&self, task: &Task, state: &SearchState) -> Result<Vec<f64>> {
        let enc = self.prepare(task)?;
        Ok(softmax(&self.forward(&enc, state)?.logits))
    }

    /// ψ′ for the given state.
    pub fn masked(&self, enc: &Encoding, state: &SearchState) -> Result<Vec<f64>> {
        masked_softmax(&self.forward(enc, state)?.logits, state)
    }

    /// Adds `scale · ∇θ log ψ′_chosen` for one step to the gradients and
    /// returns `log ψ′_chosen`. Per-task gradients are held in `acc` until
    /// [`VasPolicy::flush`].
    pub fn accumulate_log_prob(
        &mut self,
        act: &StepActivations,
        state: &SearchState,
        chosen: usize,
        scale: f64,
        acc: &mut EncodingGrad,
    ) -> Result<f64> {
        check_chosen(state, chosen)?;
        let masked = masked_softmax(&act.logits, state)?;
        let log_prob = log_masked_prob(&act.logits, state, chosen);
        let grad_logits: Vec<f64> = masked
            .iter()
            .enumerate()
            .map(|(j, &p)| scale * (f64::from(u8::from(j == chosen)) - p))
            .collect();
        self.net.backward(
            act,
            &state.observation_values(),
            state.remaining_budget(),
            &grad_logits,
            acc,
        )?;
        Ok(log_prob)
    }

    pub fn new_encoding_grad(&self) -> EncodingGrad {
        self.net.new_encoding_grad()
    }

    pub fn flush(&mut self, enc: &Encoding, acc: &EncodingGrad) -> Result<()> {
        self.net.flush(enc, acc).map(drop)
    }

    /// Accumulates `∇θ log ψ′_chosen` and returns `log ψ′_chosen`.
    pub fn log_prob_gradient(
        &mut self,
        task: &Task,
        state: &SearchState,
        chosen: usize,
    ) -> Result<f64> {
        check_chosen(state, chosen)?;
        let enc = self.prepare(task)?;
        let act = self.forward(&enc, state)?;
        let mut acc = self.new_encoding_grad();
        let log_prob = self.accumulate_log_prob(&act, state, chosen, 1.0, &mut acc)?;
        self.flush(&enc, &acc)?;
        Ok(log_prob)
    }

    /// `log ψ′_chosen` without touching gradients.
    pub fn log_prob(&self, task: &Task, state: &SearchState, chosen: usize) -> Result<f64> {
        check_chosen(state, chosen)?;
        let enc = self.prepare(task)?;
        Ok(log_masked_prob(
            &self.forward(&enc, state)?.logits,
            state,
            chosen,
        ))
    }

    /// `∂ψ_chosen / ∂latent`, channel-major like the latent map.
    pub fn input_gradient(
        &self,
        task: &Task,
        state: &SearchState,
        chosen: usize,
    ) -> Result<Vec<f64>> {
        if chosen >= self.config.n_cells {
            return Err(VasError::InvalidCell {
                cell: chosen,
                n_cells: self.config.n_cells,
            });
        }
        let mut scratch = self.clone();
        let enc = scratch.prepare(task)?;
        let act = scratch.forward(&enc, state)?;
        let psi = softmax(&act.logits);
        let grad_logits: Vec<f64> = psi
            .iter()
            .enumerate()
            .map(|(j, &p)| psi[chosen] * (f64::from(u8::from(j == chosen)) - p))
            .collect();
        let mut acc = scratch.new_encoding_grad();
        scratch.net.backward(
            &act,
            &state.observation_values(),
            state.remaining_budget(),
            &grad_logits,
            &mut acc,
        )?;
        scratch.net.flush(&enc, &acc)
    }

    /// Per-cell sum of `|∂ψ_chosen / ∂feature|` over the cell's sites and channels.
    pub fn saliency(&self, task: &Task, state: &SearchState, chosen: usize) -> Result<Vec<f64>> {
        let grad = self.input_gradient(task, state, chosen)?;
        let cells = task.site_cells(self.config.spatial_side)?;
        let sites = cells.len();
        let mut out = vec![0.0; task.n_cells()];
        for row in grad.chunks_exact(sites) {
            for (&cell, g) in cells.iter().zip(row) {
                out[cell] += g.abs();
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params): (PolicyConfig, _) = load_checkpoint(path, CHECKPOINT_KIND)?;
        let mut policy = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        policy.net.load_params(&params)?;
        Ok(policy)
    }
}

fn check_chosen(state: &SearchState, chosen: usize) -> Result<()> {
    if chosen >= state.n_cells() {
        return Err(VasError::InvalidCell {
            cell: chosen,
            n_cells: state.n_cells(),
        });
    }
    if !state.is_unqueried(chosen) {
        return Err(VasError::Contract(format!(
            "cell {chosen} was already queried"
        )));
    }
    Ok(())
}

fn log_sum_exp_unqueried(logits: &[f64], state: &SearchState) -> f64 {
    let m = state
        .unqueried()
        .map(|j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    m + state
        .unqueried()
        .map(|j| (logits[j] - m).exp())
        .sum::<f64>()
        .ln()
}

fn log_masked_prob(logits: &[f64], state: &SearchState, chosen: usize) -> f64 {
    logits[chosen] - log_sum_exp_unqueried(logits, state)
}

/// ψ′ computed from logits, equal to [`masked_distribution`] of their softmax.
pub fn masked_softmax(logits: &[f64], state: &SearchState) -> Result<Vec<f64>> {
    if logits.len() != state.n_cells() {
        return Err(VasError::Config(format!(
            "{} logits for {} cells",
            logits.len(),
            state.n_cells()
        )));
    }
    if state.unqueried_count() == 0 {
        return Err(VasError::NoAction);
    }
    let lse = log_sum_exp_unqueried(logits, state);
    Ok((0..logits.len())
        .map(|j| {
            if state.is_unqueried(j) {
                (logits[j] - lse).exp()
            } else {
                0.0
            }
        })
        .collect())
}

/// Zeroes ψ on queried cells and renormalises over the rest.
pub fn masked_distribution(psi: &[f64], state: &SearchState) -> Result<Vec<f64>> {
    if psi.len() != state.n_cells() {
        return Err(VasError::Config(format!(
            "distribution has {} entries for {} cells",
            psi.len(),
            state.n_cells()
        )));
    }
    if state.unqueried_count() == 0 {
        return Err(VasError::NoAction);
    }
    let mass: f64 = state.unqueried().map(|j| psi[j]).sum();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(VasError::Contract(format!(
            "distribution puts mass {mass} on the unqueried cells"
        )));
    }
    Ok((0..psi.len())
        .map(|j| {
            if state.is_unqueried(j) {
                psi[j] / mass
            } else {
                0.0
            }
        })
        .collect())
}

/// Picks a cell from ψ′. Argmax breaks ties towards the lowest index.
pub fn select_action<R: Rng + ?Sized>(psi: &[f64], mode: SelectMode, rng: &mut R) -> Result<usize> {
    let total: f64 = psi.iter().sum();
    if psi.is_empty()
        || psi.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        || (total - 1.0).abs() > 1e-6
    {
        return Err(VasError::Contract(format!(
            "not a probability vector: {psi:?}"
        )));
    }
    match mode {
        SelectMode::Argmax => {
            let mut best = 0;
            for (j, &p) in psi.iter().enumerate() {
                if p > psi[best] {
                    best = j;
                }
            }
            Ok(best)
        }
        SelectMode::Sample => {
            let u: f64 = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut last_positive = 0;
            for (j, &p) in psi.iter().enumerate() {
                if p > 0.0 {
                    cum += p;
                    last_positive = j;
                    if u < cum {
                        return Ok(j);
                    }
                }
            }
            Ok(last_positive)
        }
    }
}

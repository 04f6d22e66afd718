//! The grid prediction network shared by the search policy and the greedy
//! baselines.
//!
//! ```text
//! latent map  C×s×s ──projection (1×1, C→N)──► z  N×s×s
//! [z ∥ tile(o) ∥ tile(B/norm)] (2N+1)×s×s ──fuse (1×1, →3)──► 3×s×s
//!   ──flatten──► 3s² ──fc1──► 2N ──ReLU──► fc2 ──► N logits
//! ```
//!
//! The observation and budget channels are optional so that the same
//! topology serves the budget ablation and the feature-only baselines.
//!
//! Tiled channels are constant across sites, so the fused map never has to
//! be materialised: the projection part of `fuse` is computed once per task
//! (an [`Encoding`]) and each step only adds a per-channel offset. Gradients
//! flowing back into the per-task part are summed in a [`EncodingGrad`] and
//! pushed through the projection once, by [`GridNet::flush`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use vas_numnet::{relu, relu_backward, Dense, ParamId, ParamStore, Pointwise};

use crate::error::{Result, VasError};
use crate::task::Task;

/// Channels produced by the fuse layer.
pub const FUSED_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridNetConfig {
    pub n_cells: usize,
    pub latent_channels: usize,
    pub spatial_side: usize,
    pub observation_channels: bool,
    pub budget_channel: bool,
    pub budget_normalizer: f64,
}

impl GridNetConfig {
    pub fn sites(&self) -> usize {
        self.spatial_side * self.spatial_side
    }

    /// Channels entering the fuse layer: `N`, `2N` or `2N + 1`.
    pub fn fused_input_channels(&self) -> usize {
        self.n_cells
            + if self.observation_channels {
                self.n_cells
            } else {
                0
            }
            + usize::from(self.budget_channel)
    }

    pub fn flattened_width(&self) -> usize {
        FUSED_CHANNELS * self.sites()
    }

    pub fn hidden_width(&self) -> usize {
        2 * self.n_cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.latent_channels == 0 || self.spatial_side == 0 {
            return Err(VasError::Config(format!(
                "network dimensions must be positive: N={}, C={}, s={}",
                self.n_cells, self.latent_channels, self.spatial_side
            )));
        }
        if !(self.budget_normalizer.is_finite() && self.budget_normalizer > 0.0) {
            return Err(VasError::Config(format!(
                "budget_normalizer {} must be positive",
                self.budget_normalizer
            )));
        }
        Ok(())
    }
}

/// Per-task forward state that does not depend on the observations.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub latent: Vec<f64>,
    /// Projection output `z`, `N × sites`.
    pub projected: Vec<f64>,
    /// Fuse layer applied to `z` plus its bias, `3 × sites`.
    base: Vec<f64>,
}

/// Activations of one forward step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepActivations {
    pub fused: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradient with respect to the per-task part of the fused map.
#[derive(Clone, Debug)]
pub struct EncodingGrad {
    fused: Vec<f64>,
}

impl EncodingGrad {
    pub fn is_zero(&self) -> bool {
        self.fused.iter().all(|&g| g == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridNet {
    config: GridNetConfig,
    params: ParamStore,
    projection: Pointwise,
    fuse: Pointwise,
    fc1: Dense,
    fc2: Dense,
}

impl GridNet {
    pub fn new<R: Rng + ?Sized>(config: GridNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let n = config.n_cells;
        let projection = Pointwise::new(&mut params, "projection", config.latent_channels, n, rng);
        let fuse = Pointwise::new(
            &mut params,
            "fuse",
            config.fused_input_channels(),
            FUSED_CHANNELS,
            rng,
        );
        let fc1 = Dense::new(
            &mut params,
            "fc1",
            config.flattened_width(),
            config.hidden_width(),
            rng,
        );
        let fc2 = Dense::new(&mut params, "fc2", config.hidden_width(), n, rng);
        Ok(Self {
            config,
            params,
            projection,
            fuse,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &GridNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters of the trainable feature projection (φ).
    pub fn projection_params(&self) -> [ParamId; 2] {
        [self.projection.weight, self.projection.bias]
    }

    /// Parameters of the grid prediction head (ζ).
    pub fn head_params(&self) -> [ParamId; 6] {
        [
            self.fuse.weight,
            self.fuse.bias,
            self.fc1.weight,
            self.fc1.bias,
            self.fc2.weight,
            self.fc2.bias,
        ]
    }

    /// Zeroes the output layer so every cell gets the same logit.
    pub fn zero_output_layer(&mut self) {
        self.params.value_mut(self.fc2.weight).fill(0.0);
        self.params.value_mut(self.fc2.bias).fill(0.0);
    }

    /// Zeroes the feature projection, removing any dependence on the input.
    pub fn zero_projection(&mut self) {
        self.params.value_mut(self.projection.weight).fill(0.0);
        self.params.value_mut(self.projection.bias).fill(0.0);
    }

    pub fn check_task(&self, task: &Task) -> Result<()> {
        if task.n_cells() != self.config.n_cells
            || task.feature_dim() != self.config.latent_channels
        {
            return Err(VasError::Config(format!(
                "network expects N={} cells with d={} features, task {} has N={} d={}",
                self.config.n_cells,
                self.config.latent_channels,
                task.id(),
                task.n_cells(),
                task.feature_dim()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &[f64]) -> Result<()> {
        let expected = self.config.latent_channels * self.config.sites();
        if latent.len() != expected {
            return Err(VasError::Net(vas_numnet::NetError::Shape {
                layer: "latent map".into(),
                expected: format!(
                    "{}x{}x{}",
                    self.config.latent_channels, self.config.spatial_side, self.config.spatial_side
                ),
                got: latent.len().to_string(),
            }));
        }
        Ok(())
    }

    pub fn latent_map(&self, task: &Task) -> Result<Vec<f64>> {
        self.check_task(task)?;
        task.latent_map(self.config.spatial_side)
    }

    /// Runs the per-task part of the network on a latent map.
    pub fn encode_latent(&self, latent: Vec<f64>) -> Result<Encoding> {
        self.check_latent(&latent)?;
        let sites = self.config.sites();
        let n = self.config.n_cells;
        let projected = self.projection.forward(&self.params, &latent, sites)?;
        let w = self.params.value(self.fuse.weight);
        let b = self.params.value(self.fuse.bias);
        let in_ch = self.config.fused_input_channels();
        let mut base = vec![0.0; FUSED_CHANNELS * sites];
        for (k, row) in base.chunks_exact_mut(sites).enumerate() {
            row.fill(b[k]);
            for (c, z_row) in projected.chunks_exact(sites).enumerate().take(n) {
                let wc = w[k * in_ch + c];
                row.iter_mut().zip(z_row).for_each(|(r, z)| *r += wc * z);
            }
        }
        Ok(Encoding {
            latent,
            projected,
            base,
        })
    }

    pub fn encode_task(&self, task: &Task) -> Result<Encoding> {
        self.encode_latent(self.latent_map(task)?)
    }

    fn check_inputs(&self, obs: &[f64]) -> Result<()> {
        if self.config.observation_channels && obs.len() != self.config.n_cells {
            return Err(VasError::Net(vas_numnet::NetError::Shape {
                layer: "observation tiling".into(),
                expected: self.config.n_cells.to_string(),
                got: obs.len().to_string(),
            }));
        }
        Ok(())
    }

    fn normalised_budget(&self, budget: usize) -> f64 {
        budget as f64 / self.config.budget_normalizer
    }

    /// Per-channel constant the tiled channels add to the fused map.
    fn tiled_offset(&self, obs: &[f64], budget: usize) -> [f64; FUSED_CHANNELS] {
        let n = self.config.n_cells;
        let in_ch = self.config.fused_input_channels();
        let w = self.params.value(self.fuse.weight);
        let b = self.normalised_budget(budget);
        let mut offset = [0.0; FUSED_CHANNELS];
        for (k, off) in offset.iter_mut().enumerate() {
            let row = &w[k * in_ch..(k + 1) * in_ch];
            if self.config.observation_channels {
                *off += row[n..2 * n]
                    .iter()
                    .zip(obs)
                    .map(|(w, o)| w * o)
                    .sum::<f64>();
            }
            if self.config.budget_channel {
                *off += row[in_ch - 1] * b;
            }
        }
        offset
    }

    /// One forward step from a cached encoding.
    pub fn forward(&self, enc: &Encoding, obs: &[f64], budget: usize) -> Result<StepActivations> {
        self.check_inputs(obs)?;
        let sites = self.config.sites();
        let offset = self.tiled_offset(obs, budget);
        let mut fused = enc.base.clone();
        for (row, off) in fused.chunks_exact_mut(sites).zip(offset) {
            row.iter_mut().for_each(|v| *v += off);
        }
        let hidden = relu(&self.fc1.forward(&self.params, &fused)?);
        let logits = self.fc2.forward(&self.params, &hidden)?;
        Ok(StepActivations {
            fused,
            hidden,
            logits,
        })
    }

    pub fn new_encoding_grad(&self) -> EncodingGrad {
        EncodingGrad {
            fused: vec![0.0; FUSED_CHANNELS * self.config.sites()],
        }
    }

    /// Backpropagates `grad_logits` through one step. Head gradients go straight
    /// into the parameter store; the per-task part is added to `acc`.
    pub fn backward(
        &mut self,
        act: &StepActivations,
        obs: &[f64],
        budget: usize,
        grad_logits: &[f64],
        acc: &mut EncodingGrad,
    ) -> Result<()> {
        self.check_inputs(obs)?;
        let g_hidden = self
            .fc2
            .backward(&mut self.params, &act.hidden, grad_logits)?;
        let g_pre = relu_backward(&act.hidden, &g_hidden);
        let g_fused = self.fc1.backward(&mut self.params, &act.fused, &g_pre)?;

        let n = self.config.n_cells;
        let in_ch = self.config.fused_input_channels();
        let sites = self.config.sites();
        let b = self.normalised_budget(budget);
        let sums: Vec<f64> = g_fused
            .chunks_exact(sites)
            .map(|r| r.iter().sum())
            .collect();
        {
            let gw = self.params.grad_mut(self.fuse.weight);
            for (k, &s) in sums.iter().enumerate() {
                let row = &mut gw[k * in_ch..(k + 1) * in_ch];
                if self.config.observation_channels {
                    row[n..2 * n]
                        .iter_mut()
                        .zip(obs)
                        .for_each(|(g, o)| *g += s * o);
                }
                if self.config.budget_channel {
                    row[in_ch - 1] += s * b;
                }
            }
        }
        let gb = self.params.grad_mut(self.fuse.bias);
        gb.iter_mut().zip(&sums).for_each(|(g, s)| *g += s);
        acc.fused
            .iter_mut()
            .zip(&g_fused)
            .for_each(|(a, g)| *a += g);
        Ok(())
    }

    /// Pushes the accumulated per-task gradient through the fuse layer's
    /// projection channels and the projection itself. Returns the gradient
    /// with respect to the latent map.
    pub fn flush(&mut self, enc: &Encoding, acc: &EncodingGrad) -> Result<Vec<f64>> {
        let n = self.config.n_cells;
        let in_ch = self.config.fused_input_channels();
        let sites = self.config.sites();
        let mut g_proj = vec![0.0; n * sites];
        {
            let w = self.params.value(self.fuse.weight);
            for (k, g_row) in acc.fused.chunks_exact(sites).enumerate() {
                for (c, gp_row) in g_proj.chunks_exact_mut(sites).enumerate() {
                    let wc = w[k * in_ch + c];
                    gp_row
                        .iter_mut()
                        .zip(g_row)
                        .for_each(|(gp, g)| *gp += wc * g);
                }
            }
        }
        {
            let gw = self.params.grad_mut(self.fuse.weight);
            for (k, g_row) in acc.fused.chunks_exact(sites).enumerate() {
                for (c, z_row) in enc.projected.chunks_exact(sites).enumerate() {
                    gw[k * in_ch + c] += g_row.iter().zip(z_row).map(|(g, z)| g * z).sum::<f64>();
                }
            }
        }
        self.backward_projection(enc, &g_proj)
    }

    /// Backpropagates a gradient on the projection output `z` into φ.
    pub fn backward_projection(
        &mut self,
        enc: &Encoding,
        grad_projected: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self.projection.backward(
            &mut self.params,
            &enc.latent,
            self.config.sites(),
            grad_projected,
        )?)
    }

    /// The fused `(N [+N] [+1]) × s × s` map, built literally by tiling and
    /// channel concatenation.
    pub fn fused_input(&self, latent: &[f64], obs: &[f64], budget: usize) -> Result<Vec<f64>> {
        self.check_latent(latent)?;
        self.check_inputs(obs)?;
        let sites = self.config.sites();
        let projected = self.projection.forward(&self.params, latent, sites)?;
        let mut parts: Vec<Vec<f64>> = vec![projected];
        if self.config.observation_channels {
            parts.extend(obs.iter().map(|&o| vas_numnet::tile_scalar(o, sites)));
        }
        if self.config.budget_channel {
            parts.push(vas_numnet::tile_scalar(
                self.normalised_budget(budget),
                sites,
            ));
        }
        let refs: Vec<&[f64]> = parts.iter().map(Vec::as_slice).collect();
        Ok(vas_numnet::concat_channels(&refs))
    }

    /// Logits computed layer by layer over the materialised fused map.
    pub fn logits_unfactored(
        &self,
        latent: &[f64],
        obs: &[f64],
        budget: usize,
    ) -> Result<Vec<f64>> {
        let fused_in = self.fused_input(latent, obs, budget)?;
        let fused = self
            .fuse
            .forward(&self.params, &fused_in, self.config.sites())?;
        let hidden = relu(&self.fc1.forward(&self.params, &fused)?);
        Ok(self.fc2.forward(&self.params, &hidden)?)
    }

    /// Swaps in parameters (e.g. from a checkpoint) with a matching layout.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        Ok(self.params.assign_from(other)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(obs: bool, budget: bool) -> GridNetConfig {
        GridNetConfig {
            n_cells: 4,
            latent_channels: 3,
            spatial_side: 2,
            observation_channels: obs,
            budget_channel: budget,
            budget_normalizer: 4.0,
        }
    }

    #[test]
    fn factored_forward_matches_literal_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (obs_ch, budget_ch) in [(true, true), (true, false), (false, false)] {
            let net = GridNet::new(config(obs_ch, budget_ch), &mut rng).unwrap();
            let latent: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let obs = if obs_ch {
                vec![1.0, 0.0, -1.0, 0.0]
            } else {
                vec![]
            };
            let enc = net.encode_latent(latent.clone()).unwrap();
            let fast = net.forward(&enc, &obs, 2).unwrap().logits;
            let slow = net.logits_unfactored(&latent, &obs, 2).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paper_scale_widths() {
        let cfg = GridNetConfig {
            n_cells: 30,
            latent_channels: 512,
            spatial_side: 14,
            observation_channels: true,
            budget_channel: true,
            budget_normalizer: 1.0,
        };
        assert_eq!(cfg.fused_input_channels(), 61);
        assert_eq!(cfg.flattened_width(), 588);
        assert_eq!(cfg.hidden_width(), 60);
    }

    #[test]
    fn fused_input_channel_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (obs, budget, channels) in [(true, true, 9), (true, false, 8), (false, false, 4)] {
            let net = GridNet::new(config(obs, budget), &mut rng).unwrap();
            let o = if obs { vec![0.0; 4] } else { vec![] };
            let fused = net.fused_input(&[0.5; 12], &o, 3).unwrap();
            assert_eq!(fused.len(), channels * 4);
        }
    }

    #[test]
    fn rejects_wrong_latent_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = GridNet::new(config(true, true), &mut rng).unwrap();
        assert!(net.encode_latent(vec![0.0; 11]).is_err());
    }
}

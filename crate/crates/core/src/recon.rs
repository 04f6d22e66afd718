//! Reconstruction head used for test-time training: a pointwise map from the
//! projected latent map back to the input features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vas_numnet::{squared_error, ParamStore, Pointwise};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::Result;
use crate::grid_net::{Encoding, GridNet};

const CHECKPOINT_KIND: &str = "recon-head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub n_cells: usize,
    pub latent_channels: usize,
    pub spatial_side: usize,
}

impl ReconConfig {
    pub fn for_net(net: &GridNet) -> Self {
        let c = net.config();
        Self {
            n_cells: c.n_cells,
            latent_channels: c.latent_channels,
            spatial_side: c.spatial_side,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconHead {
    config: ReconConfig,
    params: ParamStore,
    layer: Pointwise,
}

impl ReconHead {
    pub fn new<R: Rng + ?Sized>(config: ReconConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let layer = Pointwise::new(
            &mut params,
            "recon",
            config.n_cells,
            config.latent_channels,
            rng,
        );
        Self {
            config,
            params,
            layer,
        }
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sites(&self) -> usize {
        self.config.spatial_side * self.config.spatial_side
    }

    pub fn reconstruct(&self, enc: &Encoding) -> Result<Vec<f64>> {
        Ok(self
            .layer
            .forward(&self.params, &enc.projected, self.sites())?)
    }

    /// Mean squared reconstruction error of the latent map.
    pub fn loss(&self, enc: &Encoding) -> Result<f64> {
        let (sum, _) = squared_error(&self.reconstruct(enc)?, &enc.latent);
        Ok(sum / enc.latent.len() as f64)
    }

    /// Accumulates `scale · ∇` of [`ReconHead::loss`] into this head and into
    /// the projection of `net`. Returns the loss.
    pub fn backward(&mut self, net: &mut GridNet, enc: &Encoding, scale: f64) -> Result<f64> {
        let recon = self.reconstruct(enc)?;
        let (sum, mut grad) = squared_error(&recon, &enc.latent);
        let norm = scale / enc.latent.len() as f64;
        grad.iter_mut().for_each(|g| *g *= norm);
        let sites = self.sites();
        let grad_z = self
            .layer
            .backward(&mut self.params, &enc.projected, sites, &grad)?;
        net.backward_projection(enc, &grad_z)?;
        Ok(sum / enc.latent.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params): (ReconConfig, _) = load_checkpoint(path, CHECKPOINT_KIND)?;
        let mut head = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        head.params.assign_from(&params)?;
        Ok(head)
    }
}

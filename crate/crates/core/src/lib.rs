pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod export;
pub mod grid_net;
pub mod pipeline;
pub mod policy;
pub mod recon;
pub mod synth;
pub mod task;
pub mod train;
pub mod tta;

pub use error::{Result, VasError};

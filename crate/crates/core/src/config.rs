//! Experiment configuration, read from JSON or from `key = value` lines.
//!
//! In the line format keys are dotted paths into the JSON structure
//! (`train.epochs = 50`), values are JSON literals where they parse as such
//! and bare strings otherwise, and a comma-separated value is a list.
//! Blank lines and lines starting with `#` are ignored.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::error::{Result, VasError};
use crate::eval::{Intervention, Method};
use crate::policy::{PolicyConfig, DEFAULT_LATENT_SIDE};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::tta::{TtaConfig, TtaMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// Field overrides applied to `synth` to build the shifted test tasks.
    pub shift: Option<Map<String, Value>>,
    pub latent_side: usize,
    /// Divisor for the budget channel; defaults to the number of cells.
    pub budget_normalizer: Option<f64>,
    pub train: TrainConfig,
    /// Train a reconstruction head jointly with the search policy.
    pub train_recon: bool,
    #[serde(deserialize_with = "one_or_many")]
    pub methods: Vec<Method>,
    #[serde(deserialize_with = "one_or_many")]
    pub budgets: Vec<usize>,
    pub tta: TtaConfig,
    #[serde(deserialize_with = "one_or_many")]
    pub tta_modes: Vec<TtaMode>,
    pub trace_tasks: usize,
    pub trace_k: usize,
    pub intervention: Intervention,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            n_train: 400,
            n_test: 200,
            shift: None,
            latent_side: DEFAULT_LATENT_SIDE,
            budget_normalizer: None,
            train: TrainConfig::default(),
            train_recon: false,
            methods: Method::ALL.to_vec(),
            budgets: vec![12, 15, 18],
            tta: TtaConfig::default(),
            tta_modes: TtaMode::ALL.to_vec(),
            trace_tasks: 100,
            trace_k: 15,
            intervention: Intervention::None,
        }
    }
}

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(xs) => xs,
    })
}

/// Seeds derived from the master seed, one per consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
    pub tta: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let draw = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(master);
            rng.set_stream(stream);
            rng.next_u64()
        };
        Self {
            data: draw(1),
            init: draw(2),
            train: draw(3),
            eval: draw(4),
            tta: draw(5),
        }
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    /// Synthetic task config with the derived data seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seeds().data,
            ..self.synth.clone()
        }
    }

    /// Synthetic config for the shifted test tasks.
    pub fn shifted_synth_config(&self) -> Result<Option<SynthConfig>> {
        let Some(overrides) = &self.shift else {
            return Ok(None);
        };
        let mut base = serde_json::to_value(self.synth_config()).expect("synth config serialises");
        let obj = base.as_object_mut().expect("synth config is an object");
        for (k, v) in overrides {
            obj.insert(k.clone(), v.clone());
        }
        let cfg: SynthConfig = serde_json::from_value(base)
            .map_err(|e| VasError::Config(format!("bad shift override: {e}")))?;
        if cfg == self.synth_config() {
            return Err(VasError::Config(
                "shift overrides leave the task distribution unchanged".into(),
            ));
        }
        Ok(Some(cfg))
    }

    pub fn policy_config(
        &self,
        (rows, cols): (usize, usize),
        latent_channels: usize,
    ) -> PolicyConfig {
        let n = rows * cols;
        PolicyConfig {
            n_cells: n,
            latent_channels,
            spatial_side: self.latent_side.max(rows).max(cols),
            use_budget_channel: true,
            budget_normalizer: self.budget_normalizer.unwrap_or(n as f64),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().train,
            ..self.train.clone()
        }
    }

    pub fn tta_config(&self) -> TtaConfig {
        TtaConfig {
            seed: self.seeds().tta,
            ..self.tta.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(VasError::Config(
                "n_train and n_test must be at least 1".into(),
            ));
        }
        if self.latent_side == 0 {
            return Err(VasError::Config("latent_side must be at least 1".into()));
        }
        let n = self.synth.n_cells();
        if let Some(&k) = self.budgets.iter().find(|&&k| k == 0 || k > n) {
            return Err(VasError::InvalidBudget { k, n_cells: n });
        }
        if self.trace_k == 0 || self.trace_k > n {
            return Err(VasError::InvalidBudget {
                k: self.trace_k,
                n_cells: n,
            });
        }
        self.train.validate(n)?;
        self.tta.validate()?;
        self.shifted_synth_config()?;
        Ok(())
    }
}

fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn value(raw: &str) -> Value {
    if raw.starts_with(['[', '{', '"']) {
        return scalar(raw);
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|s| scalar(s.trim())).collect());
    }
    scalar(raw)
}

/// Converts `key = value` lines into a JSON object.
pub fn key_values_to_json(text: &str, origin: &str) -> Result<Value> {
    let mut root = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| VasError::Config(format!("{origin}:{}: {why}", lineno + 1));
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| bad("expected key = value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key.is_empty() || raw.is_empty() {
            return Err(bad("empty key or value"));
        }
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| bad(&format!("{part} is not a section")))?;
        }
        let last = parts[parts.len() - 1];
        if node.insert(last.to_string(), value(raw)).is_some() {
            return Err(bad(&format!("{key} is set twice")));
        }
    }
    Ok(Value::Object(root))
}

pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let json = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| VasError::Config(format!("{origin}: {e}")))?
    } else {
        key_values_to_json(text, origin)?
    };
    let cfg: ExperimentConfig =
        serde_json::from_value(json).map_err(|e| VasError::Config(format!("{origin}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(VasError::io(path))?;
    parse_config(&text, &path.display().to_string())
}

//! Experiment config files (TOML).
//!
//! ```toml
//! seed = 7
//! n_clients = 3
//! rounds = 2
//! weights = [0.5, 0.3, 0.2]
//! mask_ratio = 0.1
//! backend = "paillier"
//!
//! [key]
//! security_bits = 2048
//!
//! [dp]
//! enabled = true
//! b = 2.0
//!
//! [[dropout]]
//! round = 2
//! clients = [1]
//!
//! [model]
//! layers = [4, 8, 1]
//!
//! [data]
//! kind = "synthetic"
//! samples_per_client = 16
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use selenc_core::he::KeyConfig;
use selenc_core::model::{Activation, Dataset, Layer, LossKind, ModelShape};

use crate::data;
use crate::protocol::{default_threads, DpSettings, RoundConfig, DEFAULT_LOCAL_STEPS, DEFAULT_LR};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{key}: {msg}")]
    Invalid { key: &'static str, msg: String },
    #[error(transparent)]
    Data(#[from] data::DataError),
}

fn invalid(key: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Paillier,
    Mock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub rounds: usize,
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub mask_ratio: f64,
    pub backend: BackendChoice,
    pub expansion_ratio: Option<f64>,
    pub pack_batch: Option<u32>,
    pub frac_bits: Option<u32>,
    pub local_steps: Option<usize>,
    pub lr: Option<f64>,
    pub loss: Option<String>,
    #[serde(default)]
    pub key: KeySection,
    #[serde(default)]
    pub dp: DpSection,
    #[serde(default)]
    pub dropout: Vec<DropoutEntry>,
    pub model: ModelSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySection {
    pub security_bits: Option<u32>,
    /// Directory with key files from `selenc keygen`; keys are derived from
    /// the seed when absent.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    #[serde(default)]
    pub enabled: bool,
    pub b: Option<f64>,
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutEntry {
    pub round: usize,
    pub clients: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Layer widths from input to output, e.g. `[4, 8, 1]`.
    pub layers: Vec<usize>,
    /// Activation after every hidden layer.
    pub activation: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic { samples_per_client: usize, noise: Option<f64> },
    Csv { path: PathBuf },
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub raw: RawConfig,
    pub round: RoundConfig,
    pub shape: ModelShape,
    pub key_cfg: KeyConfig,
    pub backend: BackendChoice,
    pub expansion_ratio: f64,
    /// Hex SHA-256 of the config text.
    pub config_hash: String,
    /// Directory the config was read from; relative paths resolve here.
    pub base_dir: PathBuf,
}

pub const DEFAULT_EXPANSION: f64 = 16.66;

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        let config_hash = hex::encode(Sha256::digest(text.as_bytes()));
        Self::validate(raw, config_hash, base_dir)
    }

    fn validate(raw: RawConfig, config_hash: String, base_dir: PathBuf) -> Result<Self, ConfigError> {
        if raw.n_clients == 0 {
            return Err(invalid("n_clients", "must be at least 1"));
        }
        if raw.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&raw.mask_ratio) {
            return Err(invalid("mask_ratio", format!("{} is outside [0, 1]", raw.mask_ratio)));
        }
        let weights = match &raw.weights {
            Some(w) => {
                if w.len() != raw.n_clients {
                    return Err(invalid("weights", format!("{} entries for {} clients", w.len(), raw.n_clients)));
                }
                if w.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(invalid("weights", "entries must lie in [0, 1]"));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(invalid("weights", format!("sum to {total}, not 1")));
                }
                w.clone()
            }
            None => vec![1.0 / raw.n_clients as f64; raw.n_clients],
        };

        let shape = model_shape(&raw.model)?;

        let mut key_cfg = KeyConfig::default();
        if let Some(bits) = raw.key.security_bits {
            key_cfg.security_bits = bits;
        }
        if let Some(pb) = raw.pack_batch {
            key_cfg.pack_batch = pb;
        }
        if let Some(fb) = raw.frac_bits {
            key_cfg.frac_bits = fb;
        }
        key_cfg.validate().map_err(|e| invalid("key", e.to_string()))?;

        let expansion_ratio = raw.expansion_ratio.unwrap_or(DEFAULT_EXPANSION);
        if !(expansion_ratio >= 1.0 && expansion_ratio.is_finite()) {
            return Err(invalid("expansion_ratio", format!("{expansion_ratio} must be >= 1")));
        }
        if raw.expansion_ratio.is_some() && raw.backend != BackendChoice::Mock {
            return Err(invalid("expansion_ratio", "only applies to the mock backend"));
        }

        let dp = if raw.dp.enabled {
            let b = raw.dp.b.ok_or_else(|| invalid("dp.b", "required when dp.enabled is true"))?;
            if !(b > 0.0 && b.is_finite()) {
                return Err(invalid("dp.b", format!("{b} must be positive")));
            }
            let clip = raw.dp.clip.unwrap_or(1.0);
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(invalid("dp.clip", format!("{clip} must be positive")));
            }
            Some(DpSettings { b, clip })
        } else {
            None
        };

        let mut dropout: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for entry in &raw.dropout {
            if entry.round == 0 || entry.round > raw.rounds {
                return Err(invalid("dropout.round", format!("{} is outside 1..={}", entry.round, raw.rounds)));
            }
            if let Some(c) = entry.clients.iter().find(|c| **c >= raw.n_clients) {
                return Err(invalid("dropout.clients", format!("client {c} does not exist")));
            }
            dropout.entry(entry.round).or_default().extend(entry.clients.iter().copied());
        }
        if let Some((round, _)) = dropout.iter().find(|(_, a)| a.len() == raw.n_clients) {
            return Err(invalid("dropout", format!("round {round} drops every client")));
        }

        let loss = match &raw.loss {
            Some(name) => name.parse::<LossKind>().map_err(|e| invalid("loss", e.to_string()))?,
            None => LossKind::SquaredError,
        };
        let lr = raw.lr.unwrap_or(DEFAULT_LR);
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid("lr", format!("{lr} must be positive")));
        }

        match &raw.data {
            DataSection::Synthetic { samples_per_client, noise } => {
                if *samples_per_client == 0 {
                    return Err(invalid("data.samples_per_client", "must be at least 1"));
                }
                if noise.is_some_and(|n| !(n >= 0.0 && n.is_finite())) {
                    return Err(invalid("data.noise", "must be nonnegative"));
                }
            }
            DataSection::Csv { path } => {
                if !base_dir.join(path).is_file() {
                    return Err(invalid("data.path", format!("{} is not a file", path.display())));
                }
            }
        }

        let round = RoundConfig {
            n_clients: raw.n_clients,
            rounds: raw.rounds,
            weights,
            mask_ratio: raw.mask_ratio,
            dp,
            dropout,
            seed: raw.seed,
            local_steps: raw.local_steps.unwrap_or(DEFAULT_LOCAL_STEPS),
            lr,
            loss,
            threads: default_threads(),
            timings: false,
        };
        round.validate().map_err(|e| invalid("config", e.to_string()))?;

        Ok(ExperimentSpec {
            backend: raw.backend,
            raw,
            round,
            shape,
            key_cfg,
            expansion_ratio,
            config_hash,
            base_dir,
        })
    }

    pub fn seed(&self) -> u64 {
        self.round.seed
    }

    /// Override the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.round.seed = seed;
        self.raw.seed = seed;
        self
    }

    pub fn datasets(&self) -> Result<Vec<Dataset>, ConfigError> {
        Ok(match &self.raw.data {
            DataSection::Synthetic { samples_per_client, noise } => {
                data::synthetic(&self.shape, self.round.n_clients, *samples_per_client, noise.unwrap_or(0.1), self.seed())?
            }
            DataSection::Csv { path } => data::load_csv(&self.base_dir.join(path), &self.shape, self.round.n_clients)?,
        })
    }
}

fn model_shape(m: &ModelSection) -> Result<ModelShape, ConfigError> {
    if m.layers.len() < 2 {
        return Err(invalid("model.layers", "need at least input and output widths"));
    }
    if m.layers.contains(&0) {
        return Err(invalid("model.layers", "widths must be positive"));
    }
    let activation = match &m.activation {
        Some(a) => a.parse::<Activation>().map_err(|e| invalid("model.activation", e.to_string()))?,
        None => Activation::Tanh,
    };
    let last = m.layers.len() - 2;
    let layers = m
        .layers
        .windows(2)
        .enumerate()
        .map(|(i, w)| Layer::new(w[0], w[1], if i == last { Activation::None } else { activation }))
        .collect();
    ModelShape::new(layers).map_err(|e| invalid("model.layers", e.to_string()))
}

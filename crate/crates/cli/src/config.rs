//! Run configuration file and flag merging.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pinnopf::pinn::{TrainConfig, Variant};

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Case file path or bundled case name.
    pub case: Option<String>,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub verify: VerifySection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_total: Option<usize>,
    pub labeled_frac: Option<f64>,
    pub collocation_frac: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: Option<Variant>,
    pub lambda_p: Option<f64>,
    pub lambda_l: Option<f64>,
    pub lambda_eps: Option<f64>,
    pub epochs: Option<usize>,
    pub batches: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub pg_hidden: Option<Vec<usize>>,
    pub dual_hidden: Option<Vec<usize>>,
    pub validation_frac: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub objectives: Option<Vec<String>>,
    pub node_limit: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config `{}`", path.display()))
            .map_err(|e| UsageError(format!("{e:#}")))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config `{}`: {e}", path.display())).into())
    }
}

impl TrainSection {
    /// Layers this section over the defaults.
    pub fn resolve(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            variant: self.variant.unwrap_or(d.variant),
            lambda_p: self.lambda_p.unwrap_or(d.lambda_p),
            lambda_l: self.lambda_l.unwrap_or(d.lambda_l),
            lambda_eps: self.lambda_eps.unwrap_or(d.lambda_eps),
            epochs: self.epochs.unwrap_or(d.epochs),
            batches: self.batches.unwrap_or(d.batches),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            seed: self.seed.unwrap_or(d.seed),
            pg_hidden: self.pg_hidden.clone().unwrap_or(d.pg_hidden),
            dual_hidden: self.dual_hidden.clone().unwrap_or(d.dual_hidden),
            validation_frac: self.validation_frac.unwrap_or(d.validation_frac),
        }
    }
}

/// Seeds have no default: a run must name one.
pub fn require_seed(flag: Option<u64>, file: Option<u64>, what: &str) -> Result<u64> {
    match flag.or(file) {
        Some(s) => Ok(s),
        None => bail!(UsageError(format!("{what} needs a seed (--seed or the config file)"))),
    }
}

/// Hex SHA-256 of the serialised effective settings.
pub fn config_hash<T: Serialize>(settings: &T) -> String {
    let text = serde_json::to_string(settings).expect("settings serialise");
    hex::encode(Sha256::digest(text.as_bytes()))
}

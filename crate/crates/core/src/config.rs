use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AdapterKind {
    #[serde(rename = "none")]
    None,
    #[default]
    #[serde(rename = "linear-residual", alias = "linear")]
    LinearResidual,
}

/// Hyperparameters for every stage of a discovery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    /// Matching threshold on the column-softmaxed co-occurrence matrix.
    pub tau: f64,
    /// Weight of the mean-prediction entropy regularizer.
    pub lambda: f64,
    /// Logits are `w . z / temperature`.
    pub temperature: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub seed: u64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    /// Independent seeded K-means runs; the lowest-inertia one is kept.
    pub kmeans_restarts: usize,
    pub adapter_kind: AdapterKind,
    /// Estimate the mean prediction over the whole target set each step
    /// instead of over the target mini-batch.
    pub reg_full_target: bool,
    /// Let the supervised loss normalize over every classifier column, not
    /// just the seen ones.
    pub supervised_full_softmax: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            lambda: 0.1,
            temperature: 0.1,
            iterations: 1000,
            batch_size: 32,
            lr_head: 0.001,
            lr_adapter: 0.0001,
            seed: 0,
            kmeans_max_iter: 300,
            kmeans_tol: 1e-6,
            kmeans_restarts: 10,
            adapter_kind: AdapterKind::LinearResidual,
            reg_full_target: false,
            supervised_full_softmax: false,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_head >= 0.0 && self.lr_adapter >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if self.kmeans_max_iter == 0 {
            return bad("kmeans_max_iter must be positive".into());
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be positive".into());
        }
        if !(self.kmeans_tol >= 0.0) {
            return bad("kmeans_tol must be >= 0".into());
        }
        Ok(())
    }

    /// Builds a config from a JSON object, with `overrides` taking precedence
    /// over keys in `base`. Override values are parsed as JSON when possible
    /// and used as plain strings otherwise.
    pub fn from_json(base: Value, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut object = match base {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => return Err(Error::Config(format!("expected a JSON object, got {other}"))),
        };
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            object.insert(key.replace('-', "_"), value);
        }
        let config: Self = serde_json::from_value(Value::Object(object))
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Reads a JSON config file (missing keys take defaults; unknown keys are
/// rejected) and applies command-line overrides on top.
pub fn load_config(path: impl AsRef<Path>, overrides: &BTreeMap<String, String>) -> Result<DiscoveryConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base: Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    DiscoveryConfig::from_json(base, overrides)
}

//! Layered configuration: defaults < config file (TOML) < environment <
//! command-line overrides. The resolved config is echoed into output
//! metadata so runs are reproducible.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedders::RemoteEmbedderConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: expected {expected}, got {value:?}")]
    TypeMismatch {
        key: String,
        expected: &'static str,
        value: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Encoder embedding dimension.
    pub d: usize,
    pub layers: usize,
    pub seed: u64,
    pub granularities: Vec<usize>,
    /// Sliding-window stride; 0 means stride = granularity.
    pub stride: usize,
    /// Traditional-chunking token limit.
    pub token_limit: usize,
    /// Semantic-chunking breakpoint percentile.
    pub percentile: f64,
    /// Context assembly token budget.
    pub token_budget: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub validation_interval: usize,
    pub weight_decay: f64,
    /// "toy" or "remote".
    pub embedder: String,
    pub remote: RemoteEmbedderConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d: 64,
            layers: 2,
            seed: 0,
            granularities: vec![2, 4, 8, 16, 32],
            stride: 0,
            token_limit: 256,
            percentile: 50.0,
            token_budget: 2048,
            epochs: 2,
            base_lr: 1e-4,
            warmup_fraction: 1.0 / 3.0,
            validation_interval: 1000,
            weight_decay: 0.01,
            embedder: "toy".to_string(),
            remote: RemoteEmbedderConfig::default(),
        }
    }
}

fn parse_granularities(value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|part| {
            part.trim().parse::<usize>().map_err(|_| ConfigError::TypeMismatch {
                key: "granularities".to_string(),
                expected: "comma-separated positive integers",
                value: value.to_string(),
            })
        })
        .collect()
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.to_string();
            // toml reports unknown fields as "unknown field `x`"; surface the
            // key name in our own error type.
            if let Some(rest) = msg.split("unknown field `").nth(1) {
                if let Some(key) = rest.split('`').next() {
                    return ConfigError::UnknownKey(key.to_string());
                }
            }
            ConfigError::Parse(msg)
        })
    }

    /// Apply one `key=value` override (from environment or flags). Errors
    /// name the offending key.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        macro_rules! parsed {
            ($field:ident, $ty:ty, $expected:expr) => {
                self.$field = value.parse::<$ty>().map_err(|_| ConfigError::TypeMismatch {
                    key: key.to_string(),
                    expected: $expected,
                    value: value.to_string(),
                })?
            };
        }
        match key {
            "d" => parsed!(d, usize, "positive integer"),
            "layers" => parsed!(layers, usize, "positive integer"),
            "seed" => parsed!(seed, u64, "unsigned integer"),
            "stride" => parsed!(stride, usize, "non-negative integer"),
            "token_limit" => parsed!(token_limit, usize, "positive integer"),
            "percentile" => parsed!(percentile, f64, "number in [0, 100]"),
            "token_budget" => parsed!(token_budget, usize, "positive integer"),
            "epochs" => parsed!(epochs, usize, "non-negative integer"),
            "base_lr" => parsed!(base_lr, f64, "positive number"),
            "warmup_fraction" => parsed!(warmup_fraction, f64, "number in (0, 1)"),
            "validation_interval" => parsed!(validation_interval, usize, "non-negative integer"),
            "weight_decay" => parsed!(weight_decay, f64, "non-negative number"),
            "embedder" => self.embedder = value.to_string(),
            "granularities" => self.granularities = parse_granularities(value)?,
            "remote.base_url" => self.remote.base_url = value.to_string(),
            "remote.model" => self.remote.model = value.to_string(),
            "remote.api_key_env" => self.remote.api_key_env = value.to_string(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Environment variables `FREECHUNKER_<KEY>` (dots as double
    /// underscores) map onto config keys.
    pub fn apply_env(
        &mut self,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix("FREECHUNKER_") {
                let key = rest.to_lowercase().replace("__", ".");
                // Unrelated FREECHUNKER_ variables (e.g. the API key) are not
                // config keys; skip unknown ones from the environment.
                if self.apply_override(&key, &value).is_err() && self.known_key(&key) {
                    return Err(ConfigError::TypeMismatch {
                        key,
                        expected: "parsable value",
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    fn known_key(&self, key: &str) -> bool {
        let mut probe = self.clone();
        !matches!(probe.apply_override(key, "0"), Err(ConfigError::UnknownKey(_)))
    }
}

/// Resolve with precedence: flags > environment > file > defaults.
pub fn config_load(
    file: Option<&Path>,
    env: impl Iterator<Item = (String, String)>,
    flag_overrides: &[(String, String)],
) -> Result<Config, ConfigError> {
    let mut cfg = match file {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    cfg.apply_env(env)?;
    for (key, value) in flag_overrides {
        cfg.apply_override(key, value)?;
    }
    Ok(cfg)
}

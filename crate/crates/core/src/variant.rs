//! The four aggregation protocols and their parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Wait for the first K of P workers, cancel the rest.
    KSync,
    /// Wait for the first K mini-batches from any workers, all on the same
    /// parameters; cancel the rest.
    KBatchSync,
    /// Wait for K workers; stragglers keep computing on stale parameters.
    KAsync,
    /// Wait for K mini-batches; every worker restarts immediately after a push.
    KBatchAsync,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::KSync, Variant::KBatchSync, Variant::KAsync, Variant::KBatchAsync];

    pub fn name(self) -> &'static str {
        match self {
            Variant::KSync => "k-sync",
            Variant::KBatchSync => "k-batch-sync",
            Variant::KAsync => "k-async",
            Variant::KBatchAsync => "k-batch-async",
        }
    }

    pub fn is_sync(self) -> bool {
        matches!(self, Variant::KSync | Variant::KBatchSync)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown variant '{0}' (expected k-sync, k-batch-sync, k-async or k-batch-async)")]
    UnknownVariant(String),
    #[error("K={k} must lie in [1, P={p}]")]
    KOutOfRange { k: usize, p: usize },
    #[error("mini-batch size m must be at least 1")]
    EmptyBatch,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        match key.as_str() {
            "ksync" => Ok(Variant::KSync),
            "kbatchsync" => Ok(Variant::KBatchSync),
            "kasync" => Ok(Variant::KAsync),
            "kbatchasync" => Ok(Variant::KBatchAsync),
            _ => Err(ConfigError::UnknownVariant(s.to_string())),
        }
    }
}

/// Protocol plus `(K, P, m, η)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub k: usize,
    pub p: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn one() -> usize {
    1
}

fn default_eta() -> f64 {
    0.05
}

impl VariantConfig {
    pub fn new(variant: Variant, k: usize, p: usize, m: usize, eta: f64) -> Result<Self, ConfigError> {
        let cfg = Self { variant, k, p, m, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Timing-only configuration (`m = 1`, `η` unused).
    pub fn timing(variant: Variant, k: usize, p: usize) -> Result<Self, ConfigError> {
        Self::new(variant, k, p, 1, 1.0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 || self.k > self.p {
            return Err(ConfigError::KOutOfRange { k: self.k, p: self.p });
        }
        if self.m == 0 {
            return Err(ConfigError::EmptyBatch);
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(ConfigError::BadLearningRate(self.eta));
        }
        Ok(())
    }

    pub fn with_k(self, k: usize) -> Self {
        Self { k, ..self }
    }
}

//! Engine configuration, read from a single JSON file. Every field has a
//! default, so `{}` is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cbr::CbrConfig;
use crate::corpus::DEFAULT_ACTIVE_THRESHOLD;
use crate::hybrid::HybridParams;
use crate::tuner::HyperParamGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Raw issue export (JSON lines).
    pub raw: Option<PathBuf>,
    /// Where every pipeline stage reads and writes its artifacts.
    pub workdir: PathBuf,
    pub active_threshold: usize,
    pub train_fraction: f64,
    /// Share of the training split sampled for tuning. Must be below 0.1.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            raw: None,
            workdir: PathBuf::from("triage-work"),
            active_threshold: DEFAULT_ACTIVE_THRESHOLD,
            train_fraction: 0.8,
            validation_fraction: 0.09,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    /// In-process hashed bag-of-words embedding.
    Reference { dim: usize, seed: u64 },
    /// HTTP embedding service (`GET /info`, `POST /embed`).
    Remote { url: String },
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Reference { dim: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Wra,
    Borda,
    /// Content scores only, interaction data ignored.
    ContentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub grid: HyperParamGrid,
    /// Hold the interaction points at their configured values and sweep
    /// τ, λ and W_f only.
    pub coordinate_subset: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            grid: HyperParamGrid::standard(),
            coordinate_subset: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub data: DataConfig,
    pub cbr: CbrConfig,
    pub embedding: EmbeddingConfig,
    pub hybrid: HybridParams,
    pub aggregation: Aggregation,
    pub tuning: TuningConfig,
    pub serve: ServeConfig,
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(format!("train_fraction {} outside (0, 1)", d.train_fraction));
        }
        if !(d.validation_fraction > 0.0 && d.validation_fraction < 0.1) {
            return Err(format!("validation_fraction {} outside (0, 0.1)", d.validation_fraction));
        }
        if let EmbeddingConfig::Reference { dim: 0, .. } = self.embedding {
            return Err("embedding dim must be positive".into());
        }
        self.cbr.validate().map_err(|e| e.to_string())?;
        self.hybrid.validate().map_err(|e| e.to_string())?;
        self.tuning.grid.values().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.data.workdir.join(name)
    }
}

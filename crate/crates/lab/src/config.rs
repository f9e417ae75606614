//! Experiment configuration, read from TOML.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use covae_core::covae::{ArchConfig, TrainConfig};
use covae_core::eval::EvalConfig;
use covae_core::par::derive_seed;
use covae_core::synthdata::{MapKind, SyntheticSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Covae,
    Poe,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Used in paths and in the `model` column of metrics.csv.
    pub name: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Shape of every generated dataset; `rho` and `seed` come from the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub d1: usize,
    pub d2: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub map: MapKind,
    pub obs_dim1: usize,
    pub obs_dim2: usize,
    pub sigma_x: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub sweep: Vec<f64>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|message| LabError::ConfigParse {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.sweep.is_empty() {
            return Err("sweep: at least one correlation is required".into());
        }
        if let Some(r) = self.sweep.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(format!("sweep: {r} lies outside [0, 1)"));
        }
        let mut seen = HashSet::new();
        if self.sweep.iter().any(|r| !seen.insert(rho_tag(*r))) {
            return Err("sweep: duplicate correlation".into());
        }
        if self.replicates == 0 {
            return Err("replicates: must be at least 1".into());
        }
        let d = &self.dataset;
        if d.n_train == 0 || d.n_test < 2 {
            return Err("dataset: n_train must be positive and n_test at least 2".into());
        }
        if self.arch.latent_dims != [d.d1, d.d2] {
            return Err(format!(
                "arch.latent_dims {:?} must equal [dataset.d1, dataset.d2] = [{}, {}]",
                self.arch.latent_dims, d.d1, d.d2
            ));
        }
        if self.models.is_empty() {
            return Err("models: at least one model is required".into());
        }
        let mut names = HashSet::new();
        for m in &self.models {
            let safe = !m.name.is_empty()
                && m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !safe {
                return Err(format!("models.name {:?}: use letters, digits, '-' or '_'", m.name));
            }
            if !names.insert(&m.name) {
                return Err(format!("models.name {:?} appears twice", m.name));
            }
            m.train.validate().map_err(|e| format!("models.{}.train: {e}", m.name))?;
            if m.train.online_prior && m.kind != ModelKind::Covae {
                return Err(format!("models.{}: online_prior applies to covae only", m.name));
            }
        }
        self.eval.iwae.validate().map_err(|e| format!("eval.iwae: {e}"))?;
        self.spec(0).validate().map_err(|e| format!("dataset: {e}"))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, so formatting changes do not alter it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Generator settings for sweep entry `i`.
    pub fn spec(&self, i: usize) -> SyntheticSpec {
        let d = &self.dataset;
        SyntheticSpec {
            d1: d.d1,
            d2: d.d2,
            rho: self.sweep[i],
            n: d.n_train + d.n_test,
            map: d.map,
            obs_dim1: d.obs_dim1,
            obs_dim2: d.obs_dim2,
            sigma_x: d.sigma_x,
            seed: self.dataset_seed(i),
        }
    }

    pub fn dataset_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, 0xDA7A_0000 + i as u64)
    }

    /// Shared by every model at one `(rho, replicate)` cell, so model
    /// comparisons are paired.
    pub fn run_seed(&self, rho_index: usize, replicate: usize) -> u64 {
        derive_seed(derive_seed(self.seed, 0x5EED_0000 + rho_index as u64), replicate as u64)
    }
}

/// File-name fragment for a correlation value.
pub fn rho_tag(rho: f64) -> String {
    format!("rho_{rho:.3}")
}

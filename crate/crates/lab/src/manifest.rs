//! Run manifest: which artifacts exist and how they were produced.
//!
//! Every write goes to a temporary sibling first and is renamed into place,
//! and the manifest only lists a run once its files are in place.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use covae_core::covae::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub rho: f64,
    pub seed: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub model: String,
    pub rho: f64,
    pub replicate: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub checkpoint: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub error: Option<String>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub datasets: Vec<DatasetEntry>,
    pub runs: Vec<RunEntry>,
    pub metrics: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut seeds: Vec<u64> = (0..cfg.sweep.len()).map(|i| cfg.dataset_seed(i)).collect();
        for i in 0..cfg.sweep.len() {
            seeds.extend((0..cfg.replicates).map(|r| cfg.run_seed(i, r)));
        }
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seeds,
            datasets: Vec::new(),
            runs: Vec::new(),
            metrics: Vec::new(),
        }
    }

    /// Every file path the manifest references, relative to the output dir.
    pub fn artifacts(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = self.datasets.iter().map(|d| d.path.clone()).collect();
        for r in &self.runs {
            out.extend(r.checkpoint.iter().chain(&r.sidecar).chain(&r.trace).cloned());
        }
        out.extend(self.metrics.iter().cloned());
        out
    }

    pub fn complete_run(&self, model: &str, rho: f64, replicate: usize) -> Option<&RunEntry> {
        self.runs
            .iter()
            .find(|r| r.model == model && r.rho == rho && r.replicate == replicate && r.status == RunStatus::Complete)
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Single writer for the manifest file of one output directory.
pub struct ManifestWriter {
    path: PathBuf,
    state: Mutex<RunManifest>,
}

impl ManifestWriter {
    /// Opens the manifest under `out`, starting afresh if it belongs to a
    /// different configuration.
    pub fn open(out: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let fresh = RunManifest::new(cfg);
        let state = match fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice::<RunManifest>(&bytes) {
                Ok(m) if m.config_hash == fresh.config_hash => m,
                _ => {
                    log::warn!("{} belongs to another configuration; starting a new manifest", path.display());
                    fresh
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => fresh,
            Err(e) => return Err(io_err(&path)(e)),
        };
        Ok(Self {
            path,
            state: Mutex::new(state),
        })
    }

    pub fn snapshot(&self) -> RunManifest {
        self.state.lock().expect("manifest lock").clone()
    }

    /// Applies `f` and persists the result while holding the lock.
    pub fn update(&self, f: impl FnOnce(&mut RunManifest)) -> Result<()> {
        let mut m = self.state.lock().expect("manifest lock");
        f(&mut m);
        m.datasets.sort_by(|a, b| a.rho.total_cmp(&b.rho));
        m.runs.sort_by(|a, b| {
            (&a.model, a.replicate)
                .cmp(&(&b.model, b.replicate))
                .then(a.rho.total_cmp(&b.rho))
        });
        let json = serde_json::to_vec_pretty(&*m)?;
        write_atomic(&self.path, &json)
    }
}

pub fn load(out: &Path) -> Result<RunManifest> {
    let path = out.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

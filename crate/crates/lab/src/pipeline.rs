//! generate-data, train and eval stages over the configured sweep.

use std::fs;
use std::path::{Path, PathBuf};

use covae_core::covae::{
    train_baseline, train_covae, ArchConfig, BaselineKind, CovaeError, TrainConfig, TrainTrace, TrainedModel,
};
use covae_core::eval::{evaluate, EvalConfig, MetricReport};
use covae_core::par::{derive_seed, Exec};
use covae_core::synthdata::{self, PairedDataset};

use crate::config::{rho_tag, ExperimentConfig, ModelKind};
use crate::error::{io_err, LabError, Result};
use crate::manifest::{write_atomic, DatasetEntry, ManifestWriter, RunEntry, RunStatus};
use crate::metrics::{self, MetricRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SIDECAR_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.csv";

pub fn dataset_path(rho: f64) -> PathBuf {
    PathBuf::from("data").join(format!("{}.ds", rho_tag(rho)))
}

pub fn run_dir(model: &str, rho: f64, replicate: usize) -> PathBuf {
    PathBuf::from("runs")
        .join(model)
        .join(rho_tag(rho))
        .join(format!("rep_{replicate}"))
}

/// Runs `f` over `0..n`, on a pool of `jobs` threads when given.
fn for_cells<T, F>(jobs: Option<usize>, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(j) = jobs {
            builder = builder.num_threads(j.max(1));
        }
        let pool = builder
            .build()
            .map_err(|e| io_err("thread pool")(std::io::Error::other(e)))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        (0..n).map(f).collect()
    }
}

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    manifest: ManifestWriter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSummary {
    pub complete: usize,
    pub failed: usize,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<Self> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let manifest = ManifestWriter::open(out, &cfg)?;
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
            jobs,
            manifest,
        })
    }

    pub fn manifest(&self) -> crate::manifest::RunManifest {
        self.manifest.snapshot()
    }

    pub fn generate_data(&self) -> Result<()> {
        for_cells(self.jobs, self.cfg.sweep.len(), |i| {
            let spec = self.cfg.spec(i);
            let ds = synthdata::generate_with(&spec, Exec::Parallel)?;
            let rel = dataset_path(spec.rho);
            write_atomic(&self.out.join(&rel), &synthdata::to_bytes(&ds))?;
            log::info!("wrote {}", rel.display());
            self.manifest.update(|m| {
                m.datasets.retain(|d| d.rho != spec.rho);
                m.datasets.push(DatasetEntry {
                    rho: spec.rho,
                    seed: spec.seed,
                    path: rel,
                });
            })
        })?;
        Ok(())
    }

    fn load_dataset(&self, i: usize) -> Result<(PairedDataset, PairedDataset)> {
        let rho = self.cfg.sweep[i];
        let rel = dataset_path(rho);
        let path = self.out.join(&rel);
        let listed = self.manifest.snapshot().datasets.iter().any(|d| d.rho == rho);
        if !listed || !path.exists() {
            return Err(LabError::MissingDataset(path));
        }
        let ds = synthdata::load(&path)?;
        Ok(ds.split(self.cfg.dataset.n_train))
    }

    fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut cells = Vec::new();
        for m in 0..self.cfg.models.len() {
            for i in 0..self.cfg.sweep.len() {
                for r in 0..self.cfg.replicates {
                    cells.push((m, i, r));
                }
            }
        }
        cells
    }

    /// Trains every `(model, rho, replicate)` cell. A run that diverges is
    /// recorded as failed and the sweep carries on.
    pub fn train(&self) -> Result<TrainSummary> {
        let cells = self.cells();
        let ok = for_cells(self.jobs, cells.len(), |c| {
            let (m, i, r) = cells[c];
            self.train_cell(m, i, r)
        })?;
        let complete = ok.iter().filter(|&&b| b).count();
        Ok(TrainSummary {
            complete,
            failed: ok.len() - complete,
        })
    }

    fn train_cell(&self, m: usize, i: usize, r: usize) -> Result<bool> {
        let model_cfg = &self.cfg.models[m];
        let rho = self.cfg.sweep[i];
        let (train, _) = self.load_dataset(i)?;
        let seed = self.cfg.run_seed(i, r);
        let arch = ArchConfig {
            seed,
            ..self.cfg.arch.clone()
        };
        let tcfg = TrainConfig {
            seed: derive_seed(seed, 1),
            ..model_cfg.train.clone()
        };
        let xs = [train.x1, train.x2];
        let result = match model_cfg.kind {
            ModelKind::Covae => train_covae(&xs, &arch, &tcfg).map(|(m, t)| (TrainedModel::Covae(m), t)),
            ModelKind::Poe => train_baseline(BaselineKind::Poe, &xs, &arch, &tcfg).map(|(m, t)| (TrainedModel::Baseline(m), t)),
            ModelKind::Moe => train_baseline(BaselineKind::Moe, &xs, &arch, &tcfg).map(|(m, t)| (TrainedModel::Baseline(m), t)),
        };
        let rel = run_dir(&model_cfg.name, rho, r);
        let mut entry = RunEntry {
            model: model_cfg.name.clone(),
            rho,
            replicate: r,
            seed,
            status: RunStatus::Complete,
            checkpoint: None,
            sidecar: None,
            trace: None,
            error: None,
            train: tcfg.clone(),
        };
        match result {
            Ok((model, trace)) => {
                self.stage_run(&rel, &model, &trace, &tcfg)?;
                entry.checkpoint = Some(rel.join(CHECKPOINT_FILE));
                entry.sidecar = Some(rel.join(SIDECAR_FILE));
                entry.trace = Some(rel.join(TRACE_FILE));
                log::info!("trained {}", rel.display());
            }
            Err(e @ CovaeError::NonFiniteLoss { .. }) => {
                log::warn!("{} failed: {e}", rel.display());
                entry.status = RunStatus::Failed;
                entry.error = Some(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
        let complete = entry.status == RunStatus::Complete;
        self.manifest.update(|man| {
            man.runs
                .retain(|e| !(e.model == entry.model && e.rho == rho && e.replicate == r));
            man.runs.push(entry);
        })?;
        Ok(complete)
    }

    /// Writes the run's files into a scratch directory, then renames it into place.
    fn stage_run(&self, rel: &Path, model: &TrainedModel, trace: &TrainTrace, tcfg: &TrainConfig) -> Result<()> {
        let dir = self.out.join(rel);
        let mut scratch = dir.as_os_str().to_owned();
        scratch.push(".tmp");
        let scratch = PathBuf::from(scratch);
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
        }
        fs::create_dir_all(&scratch).map_err(io_err(&scratch))?;
        model.save(&scratch.join(CHECKPOINT_FILE), &self.cfg.hash(), tcfg)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "L_joint", "L_cond", "lr"])?;
        for e in &trace.epochs {
            w.write_record([e.epoch.to_string(), e.l_joint.to_string(), e.l_cond.to_string(), e.lr.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| io_err(&scratch)(e.into_error()))?;
        fs::write(scratch.join(TRACE_FILE), bytes).map_err(io_err(&scratch))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::rename(&scratch, &dir).map_err(io_err(&dir))
    }

    /// Evaluates every completed run on its held-out split and writes metrics.csv.
    pub fn eval(&self) -> Result<PathBuf> {
        let manifest = self.manifest.snapshot();
        let mut todo = Vec::new();
        for (m, i, r) in self.cells() {
            let name = &self.cfg.models[m].name;
            let rho = self.cfg.sweep[i];
            match manifest.complete_run(name, rho, r) {
                Some(entry) => todo.push((i, entry.clone())),
                None if manifest
                    .runs
                    .iter()
                    .any(|e| &e.model == name && e.rho == rho && e.replicate == r) =>
                {
                    log::warn!("skipping failed run {}", run_dir(name, rho, r).display());
                }
                None => {
                    return Err(LabError::MissingCheckpoint(
                        self.out.join(run_dir(name, rho, r)).join(CHECKPOINT_FILE),
                    ))
                }
            }
        }
        let reports = for_cells(self.jobs, todo.len(), |c| {
            let (i, entry) = &todo[c];
            let ckpt = self.out.join(entry.checkpoint.as_ref().expect("complete runs have checkpoints"));
            if !ckpt.exists() {
                return Err(LabError::MissingCheckpoint(ckpt));
            }
            let (model, _) = TrainedModel::load(&ckpt)?;
            let (_, test) = self.load_dataset(*i)?;
            let ecfg = EvalConfig {
                seed: derive_seed(entry.seed, 2),
                ..self.cfg.eval.clone()
            };
            let rows = evaluate(&model, &test, &ecfg, Exec::Parallel)?;
            Ok(rows
                .into_iter()
                .map(|(metric, value, stderr)| MetricReport {
                    model: entry.model.clone(),
                    rho: entry.rho,
                    replicate: Some(entry.replicate),
                    metric: metric.to_string(),
                    value,
                    stderr,
                    replicates: 1,
                })
                .collect::<Vec<_>>())
        })?;
        let reports: Vec<MetricReport> = reports.into_iter().flatten().collect();
        let rows: Vec<MetricRow> = metrics::with_summaries(&reports);
        let path = self.out.join(METRICS_FILE);
        metrics::write(&path, &rows)?;
        self.manifest.update(|m| {
            m.metrics = vec![PathBuf::from(METRICS_FILE)];
        })?;
        Ok(path)
    }

    /// All three stages in order.
    pub fn run_all(&self) -> Result<PathBuf> {
        self.generate_data()?;
        let s = self.train()?;
        log::info!("{} runs complete, {} failed", s.complete, s.failed);
        self.eval()
    }
}

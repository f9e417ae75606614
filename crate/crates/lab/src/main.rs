use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covae_lab::compare::{self, Status};
use covae_lab::{metrics, ExperimentConfig, Lab, LabError};

#[derive(Parser)]
#[command(name = "covae-lab", version, about = "Synthetic sweeps for correlated multimodal VAEs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate one dataset per sweep correlation.
    GenerateData(Common),
    /// Train every model on every dataset and replicate.
    Train(Common),
    /// Evaluate trained runs and write metrics.csv.
    Eval(Common),
    /// Generate, train and evaluate in one go.
    Run(Common),
    /// Check trend predicates over metrics files.
    Compare {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn open(c: &Common) -> covae_lab::Result<Lab> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| LabError::ConfigParse {
            path: c.config.clone(),
            message: "no output directory: set out_dir or pass --out".into(),
        })?;
    Lab::new(cfg, &out, Some(c.jobs))
}

fn compare_files(paths: &[PathBuf]) -> covae_lab::Result<()> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(metrics::read(Path::new(p))?);
    }
    print!("{}", compare::summary_table(&rows));
    let outcomes = compare::run(&rows);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| o.status == Status::Fail)
        .map(|o| o.name.to_string())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(LabError::PredicateFailed(failed))
    }
}

fn run(cli: Cli) -> covae_lab::Result<()> {
    match cli.cmd {
        Cmd::GenerateData(c) => open(&c)?.generate_data(),
        Cmd::Train(c) => {
            let s = open(&c)?.train()?;
            println!("{} runs complete, {} failed", s.complete, s.failed);
            Ok(())
        }
        Cmd::Eval(c) => {
            println!("{}", open(&c)?.eval()?.display());
            Ok(())
        }
        Cmd::Run(c) => {
            println!("{}", open(&c)?.run_all()?.display());
            Ok(())
        }
        Cmd::Compare { metrics } => compare_files(&metrics),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COVAE_LAB_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ LabError::PredicateFailed(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! Front end for the `qef` binary: argument parsing, config resolution,
//! dispatch and artifact writing.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use qef_core::freqrate::RateMethod;
use qef_core::{Error, Result};

use crate::commands::{execute, Artifacts};
use crate::config::{Command, Grid, RunConfig};
use crate::output::{error_json, exit_code};

#[derive(Debug, Parser)]
#[command(name = "qef", version, about = "Quadratic-exponential functional rates for Gaussian quantum processes")]
pub struct Args {
    /// validate, rate, rate-curve, horizon, montecarlo, tail, worst-case or appendix-check
    pub command: String,
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file (overrides `model_path`)
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Comma-separated, strictly increasing
    #[arg(long = "theta-grid", value_delimiter = ',')]
    pub theta_grid: Option<Vec<f64>>,
    /// frequency, homotopy, small_theta or classical
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long = "N")]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// JSON result path (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV path for curve commands (defaults to `--out` with a .csv extension)
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Eigenpair CSV path for `horizon`
    #[arg(long)]
    pub eigenpairs: Option<PathBuf>,
}

impl Args {
    /// Loads `--config` and applies the flag overrides.
    pub fn resolve(&self) -> Result<(Command, RunConfig)> {
        let cmd: Command = self.command.parse()?;
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.model {
            cfg.model_path = Some(m.clone());
        }
        if let Some(v) = self.theta {
            cfg.theta = Some(v);
        }
        if let Some(v) = &self.theta_grid {
            cfg.theta_grid = Some(Grid::List(v.clone()));
        }
        if let Some(m) = &self.method {
            cfg.method = Some(m.parse::<RateMethod>()?);
        }
        if let Some(v) = self.horizon {
            cfg.horizon = Some(v);
            cfg.horizon_sweep = None;
        }
        if let Some(v) = self.n_points {
            cfg.n_points = Some(v);
        }
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = self.samples {
            cfg.n_samples = Some(v);
        }
        if let Some(v) = self.alpha {
            cfg.alpha = Some(v);
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = Some(v);
        }
        if let Some(v) = &self.out {
            cfg.output_path = Some(v.clone());
        }
        if let Some(v) = &self.csv {
            cfg.csv_path = Some(v.clone());
        }
        if let Some(v) = &self.eigenpairs {
            cfg.eigenpairs_path = Some(v.clone());
        }
        Ok((cmd, cfg))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::invalid("output_path", format!("{}: {e}", path.display())))
}

/// Writes the document to `output_path` (or stdout) and the CSV outputs
/// to their paths.
pub fn write_artifacts(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    match &cfg.output_path {
        Some(p) => write_file(p, &art.document)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(art.document.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::invalid("output_path", e.to_string()))?;
        }
    }
    if let Some(csv) = &art.csv {
        let path = cfg
            .csv_path
            .clone()
            .or_else(|| cfg.output_path.as_ref().map(|p| p.with_extension("csv")));
        if let Some(p) = path {
            write_file(&p, csv)?;
        }
    }
    if let (Some(csv), Some(p)) = (&art.eigenpairs, &cfg.eigenpairs_path) {
        write_file(p, csv)?;
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("QEF_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid("QEF_NUM_THREADS", format!("expected a positive integer, got `{v}`")))?;
    // A pool that is already initialized keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = Error::invalid("arguments", e.to_string().trim().to_string());
            eprintln!("{}", error_json(&err));
            return 2;
        }
    };
    let run = || -> Result<()> {
        configure_threads()?;
        let (cmd, cfg) = args.resolve()?;
        let art = execute(cmd, &cfg)?;
        write_artifacts(&cfg, &art)
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

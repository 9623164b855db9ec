//! Command-line arguments and the resolved run configuration stored in manifests.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use specrnd::estimate::DEFAULT_GRID_POINTS;
use specrnd::market::load_params;
use specrnd::qp::DEFAULT_FEAS_REL;

use crate::error::CliError;

/// Environment variable read by the logger (`error`, `warn`, `info`, `debug`).
pub const LOG_ENV: &str = "SPECRND_LOG";

#[derive(Debug, Parser)]
#[command(name = "specrnd", version, about = "Risk-neutral densities from put bid-ask quotes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate the singular system and sample the first basis elements.
    Basis(BasisArgs),
    /// Estimate the density of a quote sheet at its minimal feasible cutoff.
    Estimate(EstimateArgs),
    /// Simulate lognormal quotes and estimate at two successive cutoffs.
    Simulate(SimulateArgs),
    /// Least-squares lognormal fit to the mid prices.
    FitLognormal(FitArgs),
    /// Re-run the configuration recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    /// Upper end `B` of the strike domain.
    #[arg(long, default_value_t = 1.0)]
    pub domain: f64,
    /// Largest basis index written.
    #[arg(long, default_value_t = 3)]
    pub n_max: usize,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// CSV with columns `strike,bid,ask`.
    #[arg(long)]
    pub quotes: PathBuf,
    /// TOML with `S0`, `r`, `delta`, `tau` and optionally `B_factor`.
    #[arg(long)]
    pub params: PathBuf,
    /// `B = b_factor * F0`; falls back to the params file, then 2.
    #[arg(long)]
    pub b_factor: Option<f64>,
    #[arg(long, default_value_t = 120)]
    pub n_max: usize,
    /// Feasibility tolerance relative to the largest ask.
    #[arg(long, default_value_t = DEFAULT_FEAS_REL)]
    pub tol_feas: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    /// Number of quoted strikes around the forward.
    #[arg(long, default_value_t = 5)]
    pub strikes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub b_factor: f64,
    #[arg(long, default_value_t = 40)]
    pub n_max: usize,
    #[arg(long, default_value_t = DEFAULT_FEAS_REL)]
    pub tol_feas: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub quotes: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Also write a residual table, plot script and manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Fully resolved options of one run; the output directory is not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Basis {
        domain: f64,
        n_max: usize,
        grid_points: usize,
    },
    Estimate {
        quotes: PathBuf,
        params: PathBuf,
        b_factor: f64,
        n_max: usize,
        tol_feas: f64,
        grid_points: usize,
    },
    Simulate {
        s0: f64,
        sigma: f64,
        strikes: usize,
        seed: u64,
        b_factor: f64,
        n_max: usize,
        tol_feas: f64,
        grid_points: usize,
    },
    FitLognormal {
        quotes: PathBuf,
        params: PathBuf,
    },
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| CliError::io(p, e))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Input(format!("--{name} must be positive, got {v}")))
    }
}

fn grid(points: usize) -> Result<(), CliError> {
    if points < 2 {
        return Err(CliError::Input(format!("--grid-points must be at least 2, got {points}")));
    }
    Ok(())
}

impl BasisArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        positive("domain", self.domain)?;
        grid(self.grid_points)?;
        Ok(RunConfig::Basis {
            domain: self.domain,
            n_max: self.n_max,
            grid_points: self.grid_points,
        })
    }
}

impl EstimateArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let quotes = absolute(&self.quotes)?;
        let params = absolute(&self.params)?;
        let b_factor = match self.b_factor {
            Some(f) => f,
            None => load_params(&params)?.b_factor.unwrap_or(2.0),
        };
        positive("b-factor", b_factor)?;
        positive("tol-feas", self.tol_feas)?;
        grid(self.grid_points)?;
        Ok(RunConfig::Estimate {
            quotes,
            params,
            b_factor,
            n_max: self.n_max,
            tol_feas: self.tol_feas,
            grid_points: self.grid_points,
        })
    }
}

impl SimulateArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        positive("sigma", self.sigma)?;
        positive("b-factor", self.b_factor)?;
        positive("tol-feas", self.tol_feas)?;
        grid(self.grid_points)?;
        Ok(RunConfig::Simulate {
            s0: 100.0,
            sigma: self.sigma,
            strikes: self.strikes,
            seed: self.seed,
            b_factor: self.b_factor,
            n_max: self.n_max,
            tol_feas: self.tol_feas,
            grid_points: self.grid_points,
        })
    }
}

impl FitArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        Ok(RunConfig::FitLognormal {
            quotes: absolute(&self.quotes)?,
            params: absolute(&self.params)?,
        })
    }
}

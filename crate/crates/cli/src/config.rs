//! Run configuration: a TOML or JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use xfa_core::simulator::TruthSettings;
use xfa_core::{Condition, FitOptions, TruthPrior};

use crate::error::CliError;

/// Everything a run can be configured with. Missing fields fall back to the
/// command's defaults. Unknown fields are ignored, so a simulation manifest
/// can be fed back as a config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,

    pub scenario: Option<String>,
    pub truth_prior: Option<TruthPrior>,
    pub p: Option<usize>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub truth: Option<TruthSettings>,

    pub data: Option<PathBuf>,
    pub k_max: Option<usize>,
    pub condition: Option<Condition>,
    pub grid_rho: Option<Vec<f64>>,
    pub grid_delta: Option<Vec<f64>>,
    /// Credible interval level.
    pub level: Option<f64>,
    pub fit: Option<FitOptions>,

    pub estimate: Option<PathBuf>,
    pub truth_loadings: Option<PathBuf>,
    pub threshold: Option<f64>,

    pub fit_dir: Option<PathBuf>,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads. Defaults to the number of CPUs.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(CliError::Input)?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text)
            .with_context(|| format!("invalid JSON config {}", path.display()))
            .map_err(CliError::Input)
    } else {
        toml::from_str(&text)
            .with_context(|| format!("invalid TOML config {}", path.display()))
            .map_err(CliError::Input)
    }
}

/// Loads `--config` if given and applies the common flags on top.
pub fn base(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.threads, common.threads);
    set(&mut cfg.out, common.out.clone());
    Ok(cfg)
}

/// Overwrites `slot` when the flag was given.
pub fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

pub fn require<T: Clone>(value: &Option<T>, name: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| CliError::input(format!("missing required setting '{name}'")))
}

/// Input paths must exist when the run starts.
pub fn existing(path: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let p = require(path, name)?;
    if !p.exists() {
        return Err(CliError::input(format!("{name} path {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = require(&cfg.out, "out")?;
    fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(CliError::Io)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let toml_cfg: RunConfig = toml::from_str(
            "seed = 7\nscenario = \"sparse-high\"\ntruth_prior = \"mgp\"\np = 20\nk = 2\ngrid_rho = [1.0, 0.5]\ncondition = \"II\"\n\n[fit]\nmax_outer_iters = 50\n",
        )
        .unwrap();
        let json_cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 7, "scenario": "sparse-high", "truth_prior": "mgp", "p": 20, "k": 2,
                "grid_rho": [1.0, 0.5], "condition": "II", "fit": {"max_outer_iters": 50}, "extra": 1}"#,
        )
        .unwrap();
        assert_eq!(toml_cfg, json_cfg);
        let fit = toml_cfg.fit.unwrap();
        assert_eq!(fit.max_outer_iters, 50);
        assert_eq!(fit.max_inner_iters, FitOptions::default().max_inner_iters);
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        set(&mut cfg.seed, Some(2));
        set(&mut cfg.p, None);
        assert_eq!(cfg.seed, Some(2));
        assert_eq!(cfg.p, None);
        assert!(require(&cfg.p, "p").is_err());
    }
}

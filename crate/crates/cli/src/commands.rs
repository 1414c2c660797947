use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use xfa_core::bma::{combine, fit_grid_from, GridResult, GridSpec};
use xfa_core::estep::sample_cov;
use xfa_core::init::{lower_triangular_rotate, mle_init, DEFAULT_INIT_ITERS};
use xfa_core::metrics::{cnnl, cpev, rmse, selected_factors, threshold};
use xfa_core::simulator::parse_scenario;
use xfa_core::{Condition, FitOptions, Loadings, ScenarioSpec, SimulatedDataset, TruthPrior};

use crate::config::{existing, out_dir, require, RunConfig};
use crate::error::CliError;
use crate::io::{fmt_f64, read_matrix, write_json, write_matrix, write_text, write_vector};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    seed: u64,
    scenario: String,
    truth_prior: TruthPrior,
    p: usize,
    k: usize,
    n: usize,
    truth: &'a xfa_core::simulator::TruthSettings,
    spec: &'a ScenarioSpec,
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = require(&cfg.seed, "seed")?;
    let scenario = cfg.scenario.clone().unwrap_or_else(|| "sparse-high".into());
    let (sparsity, snr) = parse_scenario(&scenario)?;
    let truth_prior = cfg.truth_prior.unwrap_or(TruthPrior::Mgp);
    let mut spec = ScenarioSpec::new(sparsity, snr, truth_prior, require(&cfg.p, "p")?, require(&cfg.k, "k")?, seed);
    spec.n_samples = cfg.n;
    if let Some(truth) = &cfg.truth {
        spec.truth = truth.clone();
    }
    spec.validate()?;
    let out = out_dir(cfg)?;
    let d = SimulatedDataset::generate(&spec)?;
    write_matrix(&out.join("data.csv"), &d.data)?;
    write_matrix(&out.join("truth_loadings.csv"), d.loadings.matrix())?;
    write_vector(&out.join("truth_resid.csv"), d.resid_vars.vector())?;
    let manifest = Manifest {
        version: VERSION,
        seed,
        scenario: format!("{}-{}", spec.sparsity, spec.snr),
        truth_prior,
        p: spec.n_vars,
        k: spec.n_factors,
        n: spec.samples(),
        truth: &spec.truth,
        spec: &spec,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

/// One grid cell as recorded in `fit_report.json`. Infinite values are
/// stored as `null`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CellReport {
    pub index: usize,
    pub rho: f64,
    pub delta: f64,
    pub converged: bool,
    pub n_outer_iters: usize,
    pub objective: Option<f64>,
    pub log_marginal: Option<f64>,
    pub log_weight: Option<f64>,
    pub n_active_columns: usize,
    pub nnz: usize,
    pub dead_columns: Vec<usize>,
    pub n_sigma_clamped: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub seed: Option<u64>,
    pub n_samples: usize,
    pub n_vars: usize,
    pub k_max: usize,
    pub condition: Condition,
    pub level: f64,
    pub options: FitOptions,
    pub rho_values: Vec<f64>,
    pub delta_values: Vec<f64>,
    pub best_cell: usize,
    pub n_converged: usize,
    /// `(cell, row)` pairs whose Hessian block fell back to a point mass.
    pub interval_fallbacks: Vec<(usize, usize)>,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Serialize)]
struct Timings {
    init_secs: f64,
    grid_secs: f64,
    combine_secs: f64,
    total_secs: f64,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn grid_from(cfg: &RunConfig, k_max: usize) -> Result<GridSpec, CliError> {
    let condition = cfg.condition.unwrap_or(Condition::I);
    let default = GridSpec::default_for(k_max, condition)?;
    let rho = cfg.grid_rho.clone().unwrap_or_else(|| default.rho_values().to_vec());
    let delta = cfg.grid_delta.clone().unwrap_or_else(|| default.delta_values().to_vec());
    Ok(GridSpec::new(rho, delta, condition, default.rate_variant(), k_max)?)
}

fn report(cfg: &RunConfig, grid: &GridSpec, opts: FitOptions, level: f64, r: &GridResult, n: usize) -> FitReport {
    let cells = r
        .cells
        .iter()
        .enumerate()
        .map(|(g, c)| CellReport {
            index: g,
            rho: c.rho,
            delta: c.delta,
            converged: c.fit.converged,
            n_outer_iters: c.fit.n_outer_iters,
            objective: finite(c.fit.objective),
            log_marginal: finite(r.log_marginals[g]),
            log_weight: finite(r.log_weights[g]),
            n_active_columns: c.fit.n_active_columns(),
            nnz: c.fit.loadings().nnz(),
            dead_columns: c.fit.dead_columns(),
            n_sigma_clamped: c.fit.n_sigma_clamped,
            failure: c.fit.failure.clone(),
        })
        .collect::<Vec<_>>();
    FitReport {
        version: VERSION.into(),
        seed: cfg.seed,
        n_samples: n,
        n_vars: r.averaged_loadings.n_vars(),
        k_max: grid.n_factors(),
        condition: grid.condition(),
        level,
        options: opts,
        rho_values: grid.rho_values().to_vec(),
        delta_values: grid.delta_values().to_vec(),
        best_cell: r.best_cell(),
        n_converged: cells.iter().filter(|c| c.converged).count(),
        interval_fallbacks: r.intervals.flagged.clone(),
        cells,
    }
}

pub fn weights_surface_csv(report: &FitReport) -> String {
    let or_inf = |v: Option<f64>| fmt_f64(v.unwrap_or(f64::NEG_INFINITY));
    let mut out = String::from("rho,delta,log_marginal,log_weight,n_active_columns\n");
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(c.rho),
            fmt_f64(c.delta),
            or_inf(c.log_marginal),
            or_inf(c.log_weight),
            c.n_active_columns
        ));
    }
    out
}

fn intervals_csv(r: &GridResult) -> String {
    let avg = &r.averaged_loadings;
    let mut out = String::from("row,col,estimate,lower,upper\n");
    for p in 0..avg.n_vars() {
        for k in 0..avg.n_factors() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p + 1,
                k + 1,
                fmt_f64(avg[(p, k)]),
                fmt_f64(r.intervals.lower[(p, k)]),
                fmt_f64(r.intervals.upper[(p, k)])
            ));
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct CellSparsity {
    index: usize,
    rho: f64,
    delta: f64,
    nnz_per_column: Vec<usize>,
    active_per_row: Vec<usize>,
    dead_columns: Vec<usize>,
}

pub fn fit(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let data_path = existing(&cfg.data, "data")?;
    let data = read_matrix(&data_path)?;
    let s = sample_cov(&data)?;
    let k_max = cfg.k_max.unwrap_or(10.min(s.n_vars()));
    let grid = grid_from(cfg, k_max)?;
    let opts = cfg.fit.unwrap_or_default();
    opts.validate()?;
    let level = cfg.level.unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::input(format!("level must lie in (0, 1), got {level}")));
    }
    let out = out_dir(cfg)?;

    let t = Instant::now();
    let init = mle_init(&s, k_max, DEFAULT_INIT_ITERS)?;
    let init_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let cells = fit_grid_from(&s, &grid, &opts, &init)?;
    let grid_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let r = combine(&s, cells, level)?;
    let combine_secs = t.elapsed().as_secs_f64();

    write_matrix(&out.join("loadings_avg.csv"), r.averaged_loadings.matrix())?;
    write_matrix(&out.join("loadings_thresholded.csv"), r.thresholded_loadings().matrix())?;
    write_vector(&out.join("resid_avg.csv"), r.averaged_resid.vector())?;
    write_text(&out.join("intervals.csv"), &intervals_csv(&r))?;
    let rep = report(cfg, &grid, opts, level, &r, s.n_samples());
    write_text(&out.join("weights_surface.csv"), &weights_surface_csv(&rep))?;
    let cell_dir = out.join("per_cell");
    fs::create_dir_all(&cell_dir)
        .with_context(|| format!("cannot create {}", cell_dir.display()))
        .map_err(CliError::Io)?;
    for (g, c) in r.cells.iter().enumerate() {
        let l = c.fit.loadings();
        let summary = CellSparsity {
            index: g,
            rho: c.rho,
            delta: c.delta,
            nnz_per_column: (0..l.n_factors()).map(|k| l.column(k).iter().filter(|v| **v != 0.0).count()).collect(),
            active_per_row: c.fit.active_sets.iter().map(Vec::len).collect(),
            dead_columns: c.fit.dead_columns(),
        };
        write_json(&cell_dir.join(format!("cell_{g:03}.json")), &summary)?;
        write_matrix(&cell_dir.join(format!("cell_{g:03}_loadings.csv")), l.matrix())?;
    }
    write_json(&out.join("fit_report.json"), &rep)?;
    write_json(
        &out.join("timings.json"),
        &Timings {
            init_secs,
            grid_secs,
            combine_secs,
            total_secs: start.elapsed().as_secs_f64(),
        },
    )
}

fn read_report(dir: &Path) -> Result<FitReport, CliError> {
    let path = dir.join("fit_report.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(CliError::Input)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid fit report {}", path.display()))
        .map_err(CliError::Input)
}

pub fn weights_surface(cfg: &RunConfig) -> Result<(), CliError> {
    let fit_dir: PathBuf = existing(&cfg.fit_dir, "fit_dir")?;
    let rep = read_report(&fit_dir)?;
    let out = out_dir(cfg)?;
    write_text(&out.join("weights_surface.csv"), &weights_surface_csv(&rep))
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let est_path = existing(&cfg.estimate, "estimate")?;
    let mut estimate = Loadings::new(read_matrix(&est_path)?);
    let cut = cfg.threshold.unwrap_or(0.0);
    if !(cut >= 0.0) {
        return Err(CliError::input(format!("threshold must be >= 0, got {cut}")));
    }
    estimate = threshold(&estimate, cut);
    let s = match &cfg.data {
        Some(_) => Some(sample_cov(&read_matrix(&existing(&cfg.data, "data")?)?)?),
        None => None,
    };
    let (p, k) = estimate.shape();
    let mut truth = None;
    if cfg.truth_loadings.is_some() {
        let t = read_matrix(&existing(&cfg.truth_loadings, "truth_loadings")?)?;
        if t.nrows() != p || t.ncols() > k {
            return Err(CliError::input(format!(
                "truth is {}x{}, estimate is {p}x{k}",
                t.nrows(),
                t.ncols()
            )));
        }
        let mut padded = DMatrix::zeros(p, k);
        padded.columns_mut(0, t.ncols()).copy_from(&t);
        let mut t = Loadings::new(padded);
        // Dense estimates carry an arbitrary rotation; compare both in
        // lower-triangular form.
        if k <= p && estimate.iter().all(|v| *v != 0.0) {
            estimate = lower_triangular_rotate(&estimate);
            t = lower_triangular_rotate(&t);
        }
        truth = Some(t);
    }
    let mut out_text = String::from("metric,k,value\n");
    for j in 1..=k {
        out_text.push_str(&format!("cnnl,{j},{}\n", cnnl(&estimate, j)?));
    }
    if let Some(s) = &s {
        for j in 1..=k {
            out_text.push_str(&format!("cpev,{j},{}\n", fmt_f64(cpev(&estimate, s, j)?)));
        }
    }
    if let Some(t) = &truth {
        out_text.push_str(&format!("rmse,,{}\n", fmt_f64(rmse(&estimate, t)?)));
    }
    out_text.push_str(&format!("selected_factors,,{}\n", selected_factors(&estimate)));
    let out = out_dir(cfg)?;
    write_text(&out.join("metrics.csv"), &out_text)
}

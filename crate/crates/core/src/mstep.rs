//! M-step and the single-model fit driver.
//!
//! With the mGDP penalty replaced by its local linear approximation at an
//! anchor `lambda^a`, the update for row `p` is the weighted lasso
//!
//! ```text
//! argmin_l  1/2 l^T Psi l - lhat_p^T l + sum_k c_pk |l_k|,
//! c_pk = (alpha_k + 1) sigma_p^2 / (N (eta_k + |lambda^a_pk|))
//! ```
//!
//! which is solved by cyclic coordinate descent over `k = 1..K`. The residual
//! variances are then refreshed in closed form at the new loadings.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfaError};
use crate::estep::{cov_times, estep, EStepQuantities, LowRank, SampleCov};
use crate::model::{FactorModelState, Loadings, ResidualVariances};
use crate::prior::HyperSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Iteration caps and tolerances for [`fit_one`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// EM iterations (`xfaiter`).
    pub max_outer_iters: usize,
    /// Coordinate descent sweeps per M-step (`maxiter`).
    pub max_inner_iters: usize,
    /// Stop sweeping once `max |d lambda| / (1 + |lambda|)` falls below this.
    pub inner_tol: f64,
    /// Stop EM once the relative objective change falls below this.
    pub outer_tol: f64,
    /// Keep the anchor fixed and stop after a single refinement.
    pub one_step: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 200,
            max_inner_iters: 100,
            inner_tol: 1e-6,
            outer_tol: 1e-8,
            one_step: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(XfaError::InvalidInput("iteration caps must be at least 1".into()));
        }
        if !(self.inner_tol > 0.0) || !(self.outer_tol > 0.0) {
            return Err(XfaError::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// A converged (or abandoned) fit for one hyperparameter setting.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub state: FactorModelState,
    /// `A_p = {k : lambda_pk != 0}` per row.
    pub active_sets: Vec<Vec<usize>>,
    /// Log posterior at `state`.
    pub objective: f64,
    /// Objective before the first iteration followed by one value per iteration.
    pub trace: Vec<f64>,
    pub n_outer_iters: usize,
    pub converged: bool,
    /// Residual variance updates that hit the floor, summed over iterations.
    pub n_sigma_clamped: usize,
    pub log_marginal: Option<f64>,
    pub log_weight: Option<f64>,
    /// Set when the fit errored and `state` is the warm start it began from.
    pub failure: Option<String>,
}

impl ModelFit {
    pub fn loadings(&self) -> &Loadings {
        &self.state.loadings
    }

    /// Columns that are identically zero. They stay in storage.
    pub fn dead_columns(&self) -> Vec<usize> {
        let l = self.loadings();
        (0..l.n_factors())
            .filter(|&k| l.column(k).iter().all(|v| *v == 0.0))
            .collect()
    }

    pub fn n_active_columns(&self) -> usize {
        self.loadings().n_active_columns()
    }
}

/// `sign(z) max(|z| - c, 0)`; ties at `|z| == c` give exactly zero.
pub fn soft_threshold(z: f64, c: f64) -> f64 {
    if z > c {
        z - c
    } else if z < -c {
        z + c
    } else {
        0.0
    }
}

/// Thresholds `c_pk = (alpha_k + 1) sigma_p^2 / (N (eta_k + |anchor_pk|))`.
pub fn lla_thresholds(
    n_samples: usize,
    resid_vars: &ResidualVariances,
    anchor: &Loadings,
    schedule: &HyperSchedule,
) -> DMatrix<f64> {
    let n = n_samples as f64;
    DMatrix::from_fn(anchor.n_vars(), anchor.n_factors(), |p, k| {
        let params = schedule.column(k);
        (params.alpha() + 1.0) * resid_vars[p] / (n * (params.eta() + anchor[(p, k)].abs()))
    })
}

fn check_dims(s: &SampleCov, state: &FactorModelState, anchor: &Loadings, schedule: &HyperSchedule) -> Result<()> {
    let (p, k) = state.loadings.shape();
    if s.n_vars() != p || anchor.shape() != (p, k) {
        return Err(XfaError::DimensionMismatch(format!(
            "covariance {}x{}, loadings {p}x{k}, anchor {}x{}",
            s.n_vars(),
            s.n_vars(),
            anchor.n_vars(),
            anchor.n_factors()
        )));
    }
    if schedule.len() < k {
        return Err(XfaError::DimensionMismatch(format!(
            "schedule covers {} columns, loadings have {k}",
            schedule.len()
        )));
    }
    Ok(())
}

/// Weighted-lasso update of every row of the loadings, starting from
/// `state.loadings` and sweeping columns in ascending order.
pub fn coordinate_descent_lambda(
    e: &EStepQuantities,
    s: &SampleCov,
    state: &FactorModelState,
    anchor: &Loadings,
    schedule: &HyperSchedule,
    opts: &FitOptions,
) -> Result<Loadings> {
    check_dims(s, state, anchor, schedule)?;
    let (p, k) = state.loadings.shape();
    let thresholds = lla_thresholds(s.n_samples(), &state.resid_vars, anchor, schedule);
    let psi = &e.psi;
    // Rows are independent problems; results are written back in row order.
    let rows: Vec<Result<Vec<f64>>> = (0..p)
        .into_par_iter()
        .with_min_len(64)
        .map(|row| {
            let mut lam: Vec<f64> = state.loadings.row(row).iter().copied().collect();
            let lhat: Vec<f64> = e.lambda_hat.row(row).iter().copied().collect();
            let c: Vec<f64> = thresholds.row(row).iter().copied().collect();
            solve_row(psi, &lhat, &c, &mut lam, opts.max_inner_iters, opts.inner_tol)
                .map_err(|col| XfaError::Divergence { row, col })?;
            Ok(lam)
        })
        .collect();
    let mut out = DMatrix::zeros(p, k);
    for (row, lam) in rows.into_iter().enumerate() {
        let lam = lam?;
        for (col, v) in lam.into_iter().enumerate() {
            out[(row, col)] = v;
        }
    }
    Ok(Loadings::new(out))
}

/// Cyclic coordinate descent on one row. Returns the offending column on a
/// non-finite update.
fn solve_row(
    psi: &DMatrix<f64>,
    lhat: &[f64],
    c: &[f64],
    lam: &mut [f64],
    max_iters: usize,
    tol: f64,
) -> std::result::Result<(), usize> {
    let k = lam.len();
    for _ in 0..max_iters {
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            let col = psi.column(j);
            let mut partial = lhat[j];
            for (i, &l) in lam.iter().enumerate() {
                if i != j && l != 0.0 {
                    partial -= l * col[i];
                }
            }
            let updated = soft_threshold(partial, c[j]) / col[j];
            if !updated.is_finite() {
                return Err(j);
            }
            max_change = max_change.max((updated - lam[j]).abs() / (1.0 + updated.abs()));
            lam[j] = updated;
        }
        if max_change < tol {
            break;
        }
    }
    Ok(())
}

/// Result of the residual variance update.
#[derive(Debug, Clone)]
pub struct SigmaUpdate {
    pub resid_vars: ResidualVariances,
    /// Rows whose raw update fell below the floor.
    pub clamped: Vec<usize>,
}

/// `sigma_p^2 = N/(N+2) {S_pp + lambda_p^T Psi lambda_p - 2 lhat_p^T lambda_p}`,
/// floored at `max(1e-6 S_pp, 1e-12)`.
pub fn update_sigma(s: &SampleCov, e: &EStepQuantities, loadings: &Loadings) -> SigmaUpdate {
    let n = s.n_samples() as f64;
    let shrink = n / (n + 2.0);
    let l = loadings.matrix();
    let l_psi = l * &e.psi;
    let mut clamped = Vec::new();
    let values = DVector::from_fn(l.nrows(), |p, _| {
        let spp = s.matrix()[(p, p)];
        let quad = l_psi.row(p).dot(&l.row(p));
        let cross = e.lambda_hat.row(p).dot(&l.row(p));
        let raw = shrink * (spp + quad - 2.0 * cross);
        let floor = (1e-6 * spp).max(1e-12);
        if raw.is_finite() && raw >= floor {
            raw
        } else {
            clamped.push(p);
            floor
        }
    });
    SigmaUpdate {
        resid_vars: ResidualVariances::new(values).expect("floored variances are positive"),
        clamped,
    }
}

/// Gaussian log-likelihood `-(N/2){log det Omega + tr(Omega^-1 S)} - (NP/2) log 2 pi`.
pub fn log_likelihood(s: &SampleCov, state: &FactorModelState) -> Result<f64> {
    if s.n_vars() != state.n_vars() {
        return Err(XfaError::DimensionMismatch(format!(
            "covariance has {} variables, state has {}",
            s.n_vars(),
            state.n_vars()
        )));
    }
    let low_rank = LowRank::new(state)?;
    let lambda_hat_unscaled = cov_times(s, &low_rank.scaled);
    let lambda_hat = low_rank
        .core
        .solve(&lambda_hat_unscaled.transpose())
        .transpose();
    Ok(log_likelihood_parts(s, state, &lambda_hat, low_rank.log_det_omega))
}

/// Likelihood from E-step pieces: `tr(Omega^-1 S) = sum_p S_pp / sigma_p^2
/// - sum_pk lambda_pk lhat_pk / sigma_p^2`.
pub(crate) fn log_likelihood_parts(
    s: &SampleCov,
    state: &FactorModelState,
    lambda_hat: &DMatrix<f64>,
    log_det_omega: f64,
) -> f64 {
    let l = state.loadings.matrix();
    let mut trace = 0.0;
    for p in 0..state.n_vars() {
        let inv = 1.0 / state.resid_vars[p];
        trace += inv * (s.matrix()[(p, p)] - l.row(p).dot(&lambda_hat.row(p)));
    }
    let n = s.n_samples() as f64;
    let p = state.n_vars() as f64;
    -0.5 * n * (log_det_omega + trace) - 0.5 * n * p * LN_2PI
}

fn penalty(state: &FactorModelState, schedule: &HyperSchedule) -> f64 {
    let l = state.loadings.matrix();
    let mut total = 0.0;
    for k in 0..l.ncols() {
        let params = schedule.column(k);
        let w = params.alpha() + 1.0;
        for p in 0..l.nrows() {
            let x = l[(p, k)];
            if x != 0.0 {
                total += w * (x.abs() / params.eta()).ln_1p();
            }
        }
    }
    total
}

/// Log posterior: log-likelihood minus the mGDP penalty
/// `sum (alpha_k + 1) log(1 + |lambda_pk| / eta_k)` minus `sum_p log sigma_p^2`
/// from the `1/sigma^2` prior on each residual variance.
pub fn objective(s: &SampleCov, state: &FactorModelState, schedule: &HyperSchedule) -> Result<f64> {
    if schedule.len() < state.n_factors() {
        return Err(XfaError::DimensionMismatch(format!(
            "schedule covers {} columns, loadings have {}",
            schedule.len(),
            state.n_factors()
        )));
    }
    let ll = log_likelihood(s, state)?;
    Ok(ll - penalty(state, schedule) - log_det_sigma(state))
}

fn log_det_sigma(state: &FactorModelState) -> f64 {
    state.resid_vars.iter().map(|v| v.ln()).sum()
}

fn objective_from_estep(
    s: &SampleCov,
    state: &FactorModelState,
    e: &EStepQuantities,
    schedule: &HyperSchedule,
) -> f64 {
    log_likelihood_parts(s, state, &e.lambda_hat, e.log_det_omega) - penalty(state, schedule) - log_det_sigma(state)
}

/// EM with LLA M-steps from `init`. Unless `opts.one_step` is set the anchor
/// is moved to the current loadings after every iteration, which makes each
/// iteration an ascent step for [`objective`].
pub fn fit_one(
    s: &SampleCov,
    init: &FactorModelState,
    anchor: &Loadings,
    schedule: &HyperSchedule,
    opts: &FitOptions,
) -> Result<ModelFit> {
    opts.validate()?;
    check_dims(s, init, anchor, schedule)?;
    let mut state = init.clone();
    let mut anchor = anchor.clone();
    let mut e = estep(s, &state, 0.0)?;
    let mut current = objective_from_estep(s, &state, &e, schedule);
    if !current.is_finite() {
        return Err(XfaError::Numerical("objective at the starting point is not finite".into()));
    }
    let mut trace = vec![current];
    let mut converged = false;
    let mut iters = 0;
    let mut n_clamped = 0;
    while iters < opts.max_outer_iters {
        iters += 1;
        let loadings = coordinate_descent_lambda(&e, s, &state, &anchor, schedule, opts)?;
        let sigma = update_sigma(s, &e, &loadings);
        n_clamped += sigma.clamped.len();
        state = FactorModelState {
            loadings,
            resid_vars: sigma.resid_vars,
        };
        if !opts.one_step {
            anchor = state.loadings.clone();
        }
        e = estep(s, &state, 0.0)?;
        let next = objective_from_estep(s, &state, &e, schedule);
        if !next.is_finite() {
            return Err(XfaError::Numerical(format!("objective became non-finite at iteration {iters}")));
        }
        trace.push(next);
        let rel = (next - current).abs() / current.abs().max(f64::MIN_POSITIVE);
        current = next;
        if opts.one_step || rel < opts.outer_tol {
            converged = true;
            break;
        }
    }
    Ok(ModelFit {
        active_sets: state.loadings.active_sets(),
        state,
        objective: current,
        trace,
        n_outer_iters: iters,
        converged,
        n_sigma_clamped: n_clamped,
        log_marginal: None,
        log_weight: None,
        failure: None,
    })
}

//! Hyperparameter grid, Laplace-approximated marginals and model averaging.
//!
//! Every cell `g` of a `(rho, delta)` grid defines a model `M_g`. Cells are
//! fitted along a warm-start chain, each is scored by
//!
//! ```text
//! log p(Y | M_g) ~ loglik + log p(Lambda) + (log 2 pi / 2) sum_p |A_p|
//!                  - 1/2 sum_p log det(N Psi_AA / sigma_p^2 + D_p)
//! ```
//!
//! and the fits are averaged with the normalized weights.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::error::{Result, XfaError};
use crate::estep::{estep, EStepQuantities, SampleCov};
use crate::init::{mle_init, DEFAULT_INIT_ITERS};
use crate::model::{FactorModelState, Loadings, ResidualVariances};
use crate::mstep::{fit_one, log_likelihood_parts, FitOptions, ModelFit};
use crate::prior::{make_schedule, mgdp_log_density, Condition, HyperSchedule, RateVariant};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `n` log-spaced points from `a` to `b` inclusive.
pub fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let (la, lb) = (a.ln(), b.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        a
                    } else if i == n - 1 {
                        b
                    } else {
                        (la + (lb - la) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// The `(rho, delta)` grid. `rho` strictly descending, `delta` strictly
/// ascending and above 2.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    rho_values: Vec<f64>,
    delta_values: Vec<f64>,
    condition: Condition,
    rate_variant: RateVariant,
    n_factors: usize,
}

impl GridSpec {
    pub fn new(
        rho_values: Vec<f64>,
        delta_values: Vec<f64>,
        condition: Condition,
        rate_variant: RateVariant,
        n_factors: usize,
    ) -> Result<Self> {
        if rho_values.is_empty() || delta_values.is_empty() {
            return Err(XfaError::InvalidHyperparameter("grid axes must be non-empty".into()));
        }
        if n_factors == 0 {
            return Err(XfaError::InvalidHyperparameter("K must be positive".into()));
        }
        if rho_values.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(XfaError::InvalidHyperparameter("rho values must be positive".into()));
        }
        if rho_values.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(XfaError::InvalidHyperparameter("rho values must be strictly descending".into()));
        }
        if delta_values.iter().any(|d| !(d.is_finite() && *d > 2.0)) {
            return Err(XfaError::InvalidHyperparameter("delta values must exceed 2".into()));
        }
        if delta_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(XfaError::InvalidHyperparameter("delta values must be strictly ascending".into()));
        }
        Ok(Self {
            rho_values,
            delta_values,
            condition,
            rate_variant,
            n_factors,
        })
    }

    /// Eight log-spaced `delta` in `[2.1, 12]` and eight log-spaced `rho` from
    /// 10 down to 0.01. The `rho` ceiling drops to 0.95 under condition II
    /// and below `min delta` under condition III.
    pub fn default_for(n_factors: usize, condition: Condition) -> Result<Self> {
        let delta = log_space(2.1, 12.0, 8);
        let top = match condition {
            Condition::I => 10.0,
            Condition::II => 0.95,
            Condition::III => 2.0,
        };
        Self::new(log_space(top, 0.01, 8), delta, condition, RateVariant::LogN, n_factors)
    }

    pub fn rho_values(&self) -> &[f64] {
        &self.rho_values
    }

    pub fn delta_values(&self) -> &[f64] {
        &self.delta_values
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn rate_variant(&self) -> RateVariant {
        self.rate_variant
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn len(&self) -> usize {
        self.rho_values.len() * self.delta_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rho, delta)` in traversal order: `delta` ascending in the outer loop,
    /// `rho` descending in the inner loop.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.delta_values
            .iter()
            .flat_map(|&d| self.rho_values.iter().map(move |&r| (r, d)))
            .collect()
    }

    pub fn schedule(&self, rho: f64, delta: f64, n_samples: usize) -> Result<HyperSchedule> {
        make_schedule(delta, rho, n_samples, self.n_factors, self.condition, self.rate_variant)
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub rho: f64,
    pub delta: f64,
    pub schedule: HyperSchedule,
    pub fit: ModelFit,
}

/// Fits every grid cell from a fresh [`mle_init`].
pub fn fit_grid(s: &SampleCov, grid: &GridSpec, opts: &FitOptions) -> Result<Vec<GridCell>> {
    let init = mle_init(s, grid.n_factors(), DEFAULT_INIT_ITERS)?;
    fit_grid_from(s, grid, opts, &init)
}

/// Fits every grid cell along the warm-start chain rooted at `init`. The
/// first cell of a `delta` row starts from the first cell of the previous
/// row; later cells start from their left neighbour. The anchor is always the
/// warm start's loadings. A failed cell is recorded unconverged and the chain
/// continues from the last successful fit.
pub fn fit_grid_from(
    s: &SampleCov,
    grid: &GridSpec,
    opts: &FitOptions,
    init: &FactorModelState,
) -> Result<Vec<GridCell>> {
    opts.validate()?;
    if init.n_factors() != grid.n_factors() || init.n_vars() != s.n_vars() {
        return Err(XfaError::DimensionMismatch(format!(
            "initial state is {}x{}, grid has K = {} and data P = {}",
            init.n_vars(),
            init.n_factors(),
            grid.n_factors(),
            s.n_vars()
        )));
    }
    let mut cells = Vec::with_capacity(grid.len());
    let mut row_start = init.clone();
    for &delta in grid.delta_values() {
        let mut warm = row_start.clone();
        for (j, &rho) in grid.rho_values().iter().enumerate() {
            let schedule = grid.schedule(rho, delta, s.n_samples())?;
            let fit = match fit_one(s, &warm, &warm.loadings, &schedule, opts) {
                Ok(fit) => fit,
                Err(err) => failed_fit(&warm, err),
            };
            if fit.failure.is_none() {
                warm = fit.state.clone();
                if j == 0 {
                    row_start = fit.state.clone();
                }
            }
            cells.push(GridCell { rho, delta, schedule, fit });
        }
    }
    Ok(cells)
}

fn failed_fit(warm: &FactorModelState, err: XfaError) -> ModelFit {
    ModelFit {
        active_sets: warm.loadings.active_sets(),
        state: warm.clone(),
        objective: f64::NEG_INFINITY,
        trace: Vec::new(),
        n_outer_iters: 0,
        converged: false,
        n_sigma_clamped: 0,
        log_marginal: None,
        log_weight: None,
        failure: Some(err.to_string()),
    }
}

/// `H_p = N Psi_AA / sigma_p^2 + D_p` on the active set of row `p`, with
/// `D_p = diag((alpha_k + 1) / (|lambda_pk| (eta_k + |lambda_pk|)))`.
pub fn laplace_hessian_block(
    state: &FactorModelState,
    e: &EStepQuantities,
    schedule: &HyperSchedule,
    p: usize,
    n_samples: usize,
) -> DMatrix<f64> {
    let active = state.loadings.active_set(p);
    let scale = n_samples as f64 / state.resid_vars[p];
    let mut h = DMatrix::from_fn(active.len(), active.len(), |i, j| scale * e.psi[(active[i], active[j])]);
    for (i, &k) in active.iter().enumerate() {
        let params = schedule.column(k);
        let x = state.loadings[(p, k)].abs();
        h[(i, i)] += (params.alpha() + 1.0) / (x * (params.eta() + x));
    }
    h
}

fn log_det_pd(h: DMatrix<f64>) -> Option<f64> {
    if h.nrows() == 0 {
        return Some(0.0);
    }
    let chol = Cholesky::new(h)?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Laplace-approximated log marginal likelihood of the model whose MAP is
/// `state`. The prior term covers every entry, zeros included.
pub fn log_marginal(state: &FactorModelState, s: &SampleCov, schedule: &HyperSchedule) -> Result<f64> {
    let e = estep(s, state, 0.0)?;
    log_marginal_with(state, s, schedule, &e)
}

fn log_marginal_with(
    state: &FactorModelState,
    s: &SampleCov,
    schedule: &HyperSchedule,
    e: &EStepQuantities,
) -> Result<f64> {
    let ll = log_likelihood_parts(s, state, &e.lambda_hat, e.log_det_omega);
    let prior = mgdp_log_density(&state.loadings, schedule)?;
    let mut n_active = 0usize;
    let mut log_det = 0.0;
    for p in 0..state.n_vars() {
        let h = laplace_hessian_block(state, e, schedule, p, s.n_samples());
        n_active += h.nrows();
        log_det += log_det_pd(h).ok_or_else(|| {
            XfaError::Numerical(format!("Laplace Hessian block of row {p} is not positive definite"))
        })?;
    }
    Ok(ll + prior + 0.5 * LN_2PI * n_active as f64 - 0.5 * log_det)
}

/// Normalized log weights `log pi_g`. `-inf` entries get weight zero;
/// `log_priors` defaults to uniform.
pub fn model_weights(log_marginals: &[f64], log_priors: Option<&[f64]>) -> Result<Vec<f64>> {
    if let Some(lp) = log_priors {
        if lp.len() != log_marginals.len() {
            return Err(XfaError::DimensionMismatch(format!(
                "{} log marginals, {} log priors",
                log_marginals.len(),
                lp.len()
            )));
        }
    }
    let joint: Vec<f64> = log_marginals
        .iter()
        .enumerate()
        .map(|(g, &m)| m + log_priors.map_or(0.0, |lp| lp[g]))
        .collect();
    if joint.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(XfaError::InvalidInput("log marginals must be finite or -inf".into()));
    }
    let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(XfaError::InvalidInput("every model has zero marginal likelihood".into()));
    }
    let lse = max + joint.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(joint.into_iter().map(|v| v - lse).collect())
}

/// `log(1 - pi_g)` for every cell from normalized log weights, accurate even
/// when `pi_g` rounds to 1.
pub fn log_complement_weights(log_weights: &[f64]) -> Vec<f64> {
    (0..log_weights.len())
        .map(|g| {
            let others: Vec<f64> = log_weights
                .iter()
                .enumerate()
                .filter(|&(h, _)| h != g)
                .map(|(_, v)| *v)
                .collect();
            let max = others.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                max + others.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            }
        })
        .collect()
}

fn check_weights(n_models: usize, weights: &[f64]) -> Result<()> {
    if n_models == 0 || n_models != weights.len() {
        return Err(XfaError::DimensionMismatch(format!("{n_models} models, {} weights", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(XfaError::InvalidInput("weights must be non-negative".into()));
    }
    Ok(())
}

/// Entrywise weighted sums of the loadings and residual variances. Zero-weight
/// models are skipped, so a cell that is zero in every weighted model stays
/// exactly zero.
pub fn model_average(states: &[&FactorModelState], weights: &[f64]) -> Result<(Loadings, ResidualVariances)> {
    check_weights(states.len(), weights)?;
    let (p, k) = states[0].loadings.shape();
    if states.iter().any(|s| s.loadings.shape() != (p, k)) {
        return Err(XfaError::DimensionMismatch("models disagree on shape".into()));
    }
    let mut l = DMatrix::zeros(p, k);
    let mut sig = DVector::zeros(p);
    for (state, &w) in states.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        l += state.loadings.matrix() * w;
        sig += state.resid_vars.vector() * w;
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(XfaError::InvalidInput("weights sum to zero".into()));
    }
    Ok((Loadings::new(l), ResidualVariances::new(sig)?))
}

/// Per-cell Gaussian approximation of one model's posterior. `sd` is zero on
/// inactive cells and on rows whose Hessian block could not be inverted.
#[derive(Debug, Clone)]
pub struct CellPosterior {
    pub estimate: DMatrix<f64>,
    pub sd: DMatrix<f64>,
    /// Rows whose Hessian block was singular and fell back to a point mass.
    pub singular_rows: Vec<usize>,
}

/// Standard deviations from the diagonal of each inverse Hessian block.
pub fn cell_posterior(
    state: &FactorModelState,
    e: &EStepQuantities,
    schedule: &HyperSchedule,
    n_samples: usize,
) -> CellPosterior {
    let (p, k) = state.loadings.shape();
    let mut sd = DMatrix::zeros(p, k);
    let mut singular_rows = Vec::new();
    for row in 0..p {
        let active = state.loadings.active_set(row);
        if active.is_empty() {
            continue;
        }
        let h = laplace_hessian_block(state, e, schedule, row, n_samples);
        match Cholesky::new(h) {
            Some(chol) => {
                let inv = chol.inverse();
                for (i, &col) in active.iter().enumerate() {
                    sd[(row, col)] = inv[(i, i)].max(0.0).sqrt();
                }
            }
            None => singular_rows.push(row),
        }
    }
    CellPosterior {
        estimate: state.loadings.matrix().clone(),
        sd,
        singular_rows,
    }
}

#[derive(Debug, Clone)]
pub struct CredibleIntervals {
    pub level: f64,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    /// `(model index, row)` pairs that used the point-mass fallback.
    pub flagged: Vec<(usize, usize)>,
}

impl CredibleIntervals {
    /// Whether the interval of cell `(p, k)` contains zero.
    pub fn covers_zero(&self, p: usize, k: usize) -> bool {
        self.lower[(p, k)] <= 0.0 && self.upper[(p, k)] >= 0.0
    }

    /// Copy of `loadings` with every cell whose interval covers zero set to 0.
    pub fn threshold(&self, loadings: &Loadings) -> Loadings {
        let mut out = loadings.matrix().clone();
        for k in 0..out.ncols() {
            for p in 0..out.nrows() {
                if self.covers_zero(p, k) {
                    out[(p, k)] = 0.0;
                }
            }
        }
        Loadings::new(out)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mixture components `(weight, mean, sd)` for one cell; `sd = 0` is an atom.
fn mixture_quantile(components: &[(f64, f64, f64)], q: f64) -> f64 {
    let cdf = |x: f64| -> f64 {
        components
            .iter()
            .map(|&(w, m, sd)| {
                w * if sd > 0.0 {
                    normal_cdf((x - m) / sd)
                } else if x >= m {
                    1.0
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(_, m, sd) in components {
        lo = lo.min(m - 40.0 * sd);
        hi = hi.max(m + 40.0 * sd);
    }
    // Keep cdf(lo) < q <= cdf(hi).
    lo -= 1e-12 * (1.0 + lo.abs());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) >= q {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi.abs()) {
            break;
        }
    }
    // The quantile sits on an atom whenever one lies in the final bracket.
    components
        .iter()
        .filter(|c| c.2 == 0.0 && c.1 > lo && c.1 <= hi)
        .map(|c| c.1)
        .next()
        .unwrap_or(hi)
}

/// Equal-tailed intervals at `level` from the weighted mixture of the models'
/// per-cell approximations.
pub fn credible_intervals(posteriors: &[CellPosterior], weights: &[f64], level: f64) -> Result<CredibleIntervals> {
    check_weights(posteriors.len(), weights)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(XfaError::InvalidInput(format!("level must lie in (0, 1), got {level}")));
    }
    let (p, k) = posteriors[0].estimate.shape();
    if posteriors.iter().any(|c| c.estimate.shape() != (p, k)) {
        return Err(XfaError::DimensionMismatch("models disagree on shape".into()));
    }
    let total: f64 = weights.iter().sum();
    let used: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(g, w)| (g, w / total))
        .collect();
    let tail = 0.5 * (1.0 - level);
    let cells: Vec<(f64, f64)> = (0..p * k)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx % p, idx / p);
            let comps: Vec<(f64, f64, f64)> = used
                .iter()
                .map(|&(g, w)| (w, posteriors[g].estimate[(row, col)], posteriors[g].sd[(row, col)]))
                .collect();
            (mixture_quantile(&comps, tail), mixture_quantile(&comps, 1.0 - tail))
        })
        .collect();
    let lower = DMatrix::from_iterator(p, k, cells.iter().map(|c| c.0));
    let upper = DMatrix::from_iterator(p, k, cells.iter().map(|c| c.1));
    let flagged = used
        .iter()
        .flat_map(|&(g, _)| posteriors[g].singular_rows.iter().map(move |&r| (g, r)))
        .collect();
    Ok(CredibleIntervals {
        level,
        lower,
        upper,
        flagged,
    })
}

/// Everything produced by a full grid run.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// `log p(Y | M_g)`, `-inf` for unconverged or unscorable cells.
    pub log_marginals: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub averaged_loadings: Loadings,
    pub averaged_resid: ResidualVariances,
    pub intervals: CredibleIntervals,
}

impl GridResult {
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|v| v.exp()).collect()
    }

    /// Averaged loadings with cells whose interval covers zero set to 0.
    pub fn thresholded_loadings(&self) -> Loadings {
        self.intervals.threshold(&self.averaged_loadings)
    }

    pub fn best_cell(&self) -> usize {
        self.log_weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(g, _)| g)
            .unwrap_or(0)
    }
}

/// Scores already-fitted cells and combines them.
pub fn combine(s: &SampleCov, mut cells: Vec<GridCell>, level: f64) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(XfaError::InvalidInput("no grid cells".into()));
    }
    let scored: Vec<(f64, Option<CellPosterior>, Option<String>)> = cells
        .par_iter()
        .map(|cell| {
            if !cell.fit.converged {
                return (f64::NEG_INFINITY, None, None);
            }
            let state = &cell.fit.state;
            let result = estep(s, state, 0.0).and_then(|e| {
                let lm = log_marginal_with(state, s, &cell.schedule, &e)?;
                if !lm.is_finite() {
                    return Err(XfaError::Numerical("log marginal is not finite".into()));
                }
                Ok((lm, cell_posterior(state, &e, &cell.schedule, s.n_samples())))
            });
            match result {
                Ok((lm, post)) => (lm, Some(post), None),
                Err(err) => (f64::NEG_INFINITY, None, Some(err.to_string())),
            }
        })
        .collect();
    let log_marginals: Vec<f64> = scored.iter().map(|c| c.0).collect();
    let log_weights = model_weights(&log_marginals, None)
        .map_err(|_| XfaError::Numerical("no grid cell converged".into()))?;
    let weights: Vec<f64> = log_weights.iter().map(|v| v.exp()).collect();
    let mut posteriors = Vec::with_capacity(cells.len());
    for (g, (cell, (lm, post, err))) in cells.iter_mut().zip(scored).enumerate() {
        cell.fit.log_marginal = lm.is_finite().then_some(lm);
        cell.fit.log_weight = Some(log_weights[g]);
        if let Some(err) = err {
            cell.fit.failure = Some(format!("scoring failed: {err}"));
        }
        posteriors.push(post.unwrap_or_else(|| CellPosterior {
            estimate: cell.fit.state.loadings.matrix().clone(),
            sd: DMatrix::zeros(cell.fit.state.n_vars(), cell.fit.state.n_factors()),
            singular_rows: Vec::new(),
        }));
    }
    let states: Vec<&FactorModelState> = cells.iter().map(|c| &c.fit.state).collect();
    let (averaged_loadings, averaged_resid) = model_average(&states, &weights)?;
    let intervals = credible_intervals(&posteriors, &weights, level)?;
    Ok(GridResult {
        cells,
        log_marginals,
        log_weights,
        averaged_loadings,
        averaged_resid,
        intervals,
    })
}

/// `fit_grid` followed by [`combine`].
pub fn fit_bma(s: &SampleCov, grid: &GridSpec, opts: &FitOptions, level: f64) -> Result<GridResult> {
    let cells = fit_grid(s, grid, opts)?;
    combine(s, cells, level)
}

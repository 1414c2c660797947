//! Loadings-matrix evaluation metrics. Nonzero always means an exact nonzero.

use crate::error::{Result, XfaError};
use crate::estep::SampleCov;
use crate::model::Loadings;

fn check_column(loadings: &Loadings, k: usize) -> Result<()> {
    if k == 0 || k > loadings.n_factors() {
        return Err(XfaError::InvalidInput(format!(
            "column index {k} outside 1..={}",
            loadings.n_factors()
        )));
    }
    Ok(())
}

/// Cumulative number of nonzero loadings in columns `1..=k`.
pub fn cnnl(loadings: &Loadings, k: usize) -> Result<usize> {
    check_column(loadings, k)?;
    Ok(loadings.columns(0, k).iter().filter(|v| **v != 0.0).count())
}

/// Cumulative proportion of explained variance: `||Lambda_{1:k}||_F^2 / tr(S)`.
pub fn cpev(loadings: &Loadings, s: &SampleCov, k: usize) -> Result<f64> {
    check_column(loadings, k)?;
    if loadings.n_vars() != s.n_vars() {
        return Err(XfaError::DimensionMismatch(format!(
            "loadings have {} rows, covariance has {} variables",
            loadings.n_vars(),
            s.n_vars()
        )));
    }
    let total = s.trace();
    if total == 0.0 {
        return Err(XfaError::InvalidInput("tr(S) is zero".into()));
    }
    Ok(loadings.columns(0, k).norm_squared() / total)
}

/// Root mean squared entrywise difference.
pub fn rmse(estimate: &Loadings, truth: &Loadings) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(XfaError::DimensionMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let cells = estimate.len();
    if cells == 0 {
        return Ok(0.0);
    }
    Ok(((estimate.matrix() - truth.matrix()).norm_squared() / cells as f64).sqrt())
}

/// Columns with at least one nonzero entry.
pub fn selected_factors(loadings: &Loadings) -> usize {
    loadings.n_active_columns()
}

/// Zeroes entries with `|lambda| <= threshold`. A threshold of 0 leaves the
/// matrix unchanged.
pub fn threshold(loadings: &Loadings, threshold: f64) -> Loadings {
    Loadings::new(loadings.map(|v| if v.abs() <= threshold { 0.0 } else { v }))
}

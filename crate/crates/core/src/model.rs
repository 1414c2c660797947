use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, XfaError};

/// Dense `P x K` loadings matrix. Zeros produced by the estimator are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Loadings(DMatrix<f64>);

impl Loadings {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self(matrix)
    }

    pub fn zeros(n_vars: usize, n_factors: usize) -> Self {
        Self(DMatrix::zeros(n_vars, n_factors))
    }

    pub fn n_vars(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Column indices `k` with `lambda_pk != 0` for row `p`, ascending.
    pub fn active_set(&self, p: usize) -> Vec<usize> {
        (0..self.n_factors())
            .filter(|&k| self.0[(p, k)] != 0.0)
            .collect()
    }

    pub fn active_sets(&self) -> Vec<Vec<usize>> {
        (0..self.n_vars()).map(|p| self.active_set(p)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.0.iter().filter(|v| **v != 0.0).count()
    }

    /// Number of columns holding at least one exact nonzero.
    pub fn n_active_columns(&self) -> usize {
        (0..self.n_factors())
            .filter(|&k| self.0.column(k).iter().any(|v| *v != 0.0))
            .count()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Loadings {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<DMatrix<f64>> for Loadings {
    fn from(m: DMatrix<f64>) -> Self {
        Self(m)
    }
}

/// Diagonal of the residual covariance. Every entry is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVariances(DVector<f64>);

impl ResidualVariances {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some((p, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(XfaError::InvalidInput(format!(
                "residual variance {p} must be positive and finite, got {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn ones(n_vars: usize) -> Self {
        Self(DVector::from_element(n_vars, 1.0))
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for ResidualVariances {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Parameters `(Lambda, Sigma)` of the factor model `y = Lambda z + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelState {
    pub loadings: Loadings,
    pub resid_vars: ResidualVariances,
}

impl FactorModelState {
    pub fn new(loadings: Loadings, resid_vars: ResidualVariances) -> Result<Self> {
        if loadings.n_vars() != resid_vars.len() {
            return Err(XfaError::DimensionMismatch(format!(
                "loadings have {} rows but there are {} residual variances",
                loadings.n_vars(),
                resid_vars.len()
            )));
        }
        if !loadings.is_finite() {
            return Err(XfaError::InvalidInput("loadings contain non-finite values".into()));
        }
        Ok(Self { loadings, resid_vars })
    }

    pub fn n_vars(&self) -> usize {
        self.loadings.n_vars()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.n_factors()
    }

    /// `Omega = Lambda Lambda^T + Sigma`, formed explicitly. Only for small `P`.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let l = self.loadings.matrix();
        let mut omega = l * l.transpose();
        for p in 0..self.n_vars() {
            omega[(p, p)] += self.resid_vars[p];
        }
        omega
    }
}

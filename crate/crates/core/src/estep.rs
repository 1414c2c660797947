//! Conditional expectations of the E-step.
//!
//! With `Omega = Lambda Lambda^T + Sigma` the E-step needs
//!
//! ```text
//! Gamma  = Omega^-1 Lambda
//! Delta  = I - Lambda^T Gamma
//! Psi    = Delta + Gamma^T S Gamma
//! Lhat   = S Gamma
//! ```
//!
//! None of these require the `P x P` inverse. With `B = Sigma^-1 Lambda` and
//! `A = I + Lambda^T B` we have `Gamma = B A^-1`, `Delta = A^-1` and
//! `log det Omega = sum log sigma^2 + log det A`, so each call is
//! `O(P K^2 + K^3)` plus the product `S B`, which only touches the rows of
//! `S` where the loadings are nonzero.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, XfaError};
use crate::model::FactorModelState;

/// Centered second-moment matrix `S = Y^T Y / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCov {
    matrix: DMatrix<f64>,
    n_samples: usize,
}

impl SampleCov {
    /// Wrap an existing covariance. Checks symmetry, a non-negative diagonal
    /// and finiteness.
    pub fn from_matrix(matrix: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(XfaError::InvalidInput(format!(
                "sample covariance must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if n_samples < 2 {
            return Err(XfaError::InvalidInput(format!(
                "need at least 2 samples, got {n_samples}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(XfaError::InvalidInput("sample covariance is not finite".into()));
        }
        let scale = matrix.amax().max(1.0);
        let p = matrix.nrows();
        for i in 0..p {
            if matrix[(i, i)] < 0.0 {
                return Err(XfaError::InvalidInput(format!(
                    "negative variance {} at index {i}",
                    matrix[(i, i)]
                )));
            }
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(XfaError::InvalidInput(format!(
                        "sample covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { matrix, n_samples })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_vars(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

/// Center the columns of an `N x P` data matrix and form `Y^T Y / N`.
pub fn sample_cov(data: &DMatrix<f64>) -> Result<SampleCov> {
    let n = data.nrows();
    if n < 2 {
        return Err(XfaError::InvalidInput(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        let (row, col) = (pos % n, pos / n);
        return Err(XfaError::InvalidInput(format!(
            "non-finite data value at row {row}, column {col}"
        )));
    }
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let mut s = centered.tr_mul(&centered) / n as f64;
    symmetrize(&mut s);
    SampleCov::from_matrix(s, n)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Low-rank pieces shared by the E-step and the likelihood.
pub(crate) struct LowRank {
    /// `B = Sigma^-1 Lambda`.
    pub scaled: DMatrix<f64>,
    /// Cholesky factor of `A = I + Lambda^T Sigma^-1 Lambda`.
    pub core: Cholesky<f64, Dyn>,
    pub log_det_omega: f64,
}

impl LowRank {
    pub fn new(state: &FactorModelState) -> Result<Self> {
        let l = state.loadings.matrix();
        let (p, k) = l.shape();
        let mut scaled = l.clone();
        for i in 0..p {
            let inv = 1.0 / state.resid_vars[i];
            for j in 0..k {
                scaled[(i, j)] *= inv;
            }
        }
        let mut a = l.tr_mul(&scaled);
        symmetrize(&mut a);
        for j in 0..k {
            a[(j, j)] += 1.0;
        }
        let core = Cholesky::new(a).ok_or_else(|| {
            XfaError::Numerical("I + Lambda^T Sigma^-1 Lambda is not positive definite".into())
        })?;
        let log_det_a = 2.0 * core.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_det_sigma: f64 = state.resid_vars.iter().map(|v| v.ln()).sum();
        Ok(Self {
            scaled,
            core,
            log_det_omega: log_det_sigma + log_det_a,
        })
    }
}

/// `S * B`, skipping rows of `B` that are exactly zero in each column.
pub(crate) fn cov_times(s: &SampleCov, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = b.shape();
    let nnz = b.iter().filter(|v| **v != 0.0).count();
    if 2 * nnz >= p * k {
        return s.matrix() * b;
    }
    let sm = s.matrix();
    let mut out = DMatrix::zeros(p, k);
    for j in 0..k {
        let mut col = out.column_mut(j);
        for r in 0..p {
            let w = b[(r, j)];
            if w != 0.0 {
                col.axpy(w, &sm.column(r), 1.0);
            }
        }
    }
    out
}

/// Gamma, Delta, Psi, Lhat and the Cholesky factor of Psi at one parameter value.
#[derive(Debug, Clone)]
pub struct EStepQuantities {
    pub gamma: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    /// Includes any jitter that was needed for the factorization.
    pub psi: DMatrix<f64>,
    pub lambda_hat: DMatrix<f64>,
    /// Lower-triangular `C` with `C C^T = psi`.
    pub chol_psi: DMatrix<f64>,
    /// Multiple of the identity added to Psi.
    pub jitter: f64,
    pub(crate) log_det_omega: f64,
}

impl EStepQuantities {
    pub fn n_factors(&self) -> usize {
        self.psi.nrows()
    }

    pub fn log_det_omega(&self) -> f64 {
        self.log_det_omega
    }
}

pub fn estep(s: &SampleCov, state: &FactorModelState, jitter: f64) -> Result<EStepQuantities> {
    let (p, k) = state.loadings.shape();
    if s.n_vars() != p {
        return Err(XfaError::DimensionMismatch(format!(
            "covariance is {}x{} but loadings have {p} rows",
            s.n_vars(),
            s.n_vars()
        )));
    }
    if k > p {
        return Err(XfaError::DimensionMismatch(format!(
            "K = {k} exceeds P = {p}"
        )));
    }
    if !(jitter >= 0.0) {
        return Err(XfaError::InvalidInput(format!("jitter must be >= 0, got {jitter}")));
    }
    let low_rank = LowRank::new(state)?;
    let delta = low_rank.core.inverse();
    let gamma = &low_rank.scaled * &delta;
    let lambda_hat = cov_times(s, &low_rank.scaled) * &delta;
    let mut psi = &delta + gamma.tr_mul(&lambda_hat);
    symmetrize(&mut psi);
    let (psi, chol_psi, jitter) = factor_with_jitter(psi, jitter)?;
    Ok(EStepQuantities {
        gamma,
        delta,
        psi,
        lambda_hat,
        chol_psi,
        jitter,
        log_det_omega: low_rank.log_det_omega,
    })
}

/// Cholesky with additive `jitter * I` escalation: first the requested jitter,
/// then `1e-10 tr/K`, growing tenfold up to `1e-4 tr/K`.
fn factor_with_jitter(
    psi: DMatrix<f64>,
    jitter: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let k = psi.nrows();
    if k == 0 {
        return Ok((psi, DMatrix::zeros(0, 0), 0.0));
    }
    let base = (psi.trace() / k as f64).abs().max(f64::MIN_POSITIVE);
    let mut attempts = vec![jitter];
    let mut j = 1e-10;
    while j <= 1e-4 * (1.0 + 1e-9) {
        attempts.push(jitter + j * base);
        j *= 10.0;
    }
    let mut last = jitter;
    for add in attempts {
        let mut candidate = psi.clone();
        for i in 0..k {
            candidate[(i, i)] += add;
        }
        if let Some(chol) = Cholesky::new(candidate.clone()) {
            let l = chol.unpack();
            if l.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok((candidate, l, add));
            }
        }
        last = add;
    }
    Err(XfaError::DegeneratePsi { jitter: last })
}

/// Pseudo response `w_p` solving `C w_p = lhat_p`, so that with the pseudo
/// design `X = C^T` one has `X^T X = Psi` and `X^T w_p = lhat_p`.
pub fn pseudo_response(e: &EStepQuantities, p: usize) -> DVector<f64> {
    let rhs: DVector<f64> = e.lambda_hat.row(p).transpose();
    e.chol_psi
        .solve_lower_triangular(&rhs)
        .expect("Cholesky factor has a positive diagonal")
}

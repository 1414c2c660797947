#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use xfa_core::estep::{sample_cov, SampleCov};
use xfa_core::{FactorModelState, Loadings, ResidualVariances, SeededRng};

pub fn normal_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random state with dense standard-normal loadings and variances in (0.5, 1.5).
pub fn random_state(rng: &mut SeededRng, p: usize, k: usize) -> FactorModelState {
    let l = normal_matrix(rng, p, k);
    let sig = DVector::from_fn(p, |_, _| rng.random_range(0.5..1.5));
    FactorModelState::new(Loadings::new(l), ResidualVariances::new(sig).unwrap()).unwrap()
}

/// Sample covariance of `n` draws from the model in `state`.
pub fn draw_cov(rng: &mut SeededRng, state: &FactorModelState, n: usize) -> SampleCov {
    let k = state.n_factors();
    let z = normal_matrix(rng, n, k);
    let mut y = z * state.loadings.matrix().transpose();
    for mut row in y.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += state.resid_vars[j].sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }
    sample_cov(&y).unwrap()
}

/// Random symmetric positive definite `k x k` matrix with eigenvalues in (0.2, 3).
pub fn random_spd(rng: &mut SeededRng, k: usize) -> DMatrix<f64> {
    let q = normal_matrix(rng, k, k).qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(k, |_, _| rng.random_range(0.2..3.0)));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// `1/2 l' Psi l - lhat' l + sum c |l|`.
pub fn row_objective(psi: &DMatrix<f64>, lhat: &DVector<f64>, c: &DVector<f64>, l: &DVector<f64>) -> f64 {
    0.5 * l.dot(&(psi * l)) - lhat.dot(l) + c.iter().zip(l.iter()).map(|(c, v)| c * v.abs()).sum::<f64>()
}

/// Accelerated proximal gradient with fixed step `1 / lambda_max(Psi)`.
pub fn prox_grad(psi: &DMatrix<f64>, lhat: &DVector<f64>, c: &DVector<f64>, iters: usize) -> DVector<f64> {
    let lmax = SymmetricEigen::new(psi.clone()).eigenvalues.max();
    let step = 1.0 / lmax;
    let k = lhat.len();
    let mut x = DVector::zeros(k);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let grad = psi * &y - lhat;
        let z = &y - grad * step;
        let x_next = DVector::from_fn(k, |i, _| {
            let thr = step * c[i];
            z[i].signum() * (z[i].abs() - thr).max(0.0)
        });
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
        x = x_next;
        t = t_next;
    }
    x
}

/// Largest violation of the lasso stationarity conditions at `l`.
pub fn kkt_violation(psi: &DMatrix<f64>, lhat: &DVector<f64>, c: &DVector<f64>, l: &DVector<f64>) -> f64 {
    let grad = psi * l - lhat;
    (0..l.len())
        .map(|i| {
            if l[i] != 0.0 {
                (grad[i] + l[i].signum() * c[i]).abs()
            } else {
                (grad[i].abs() - c[i]).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Direct `P x P` log-likelihood.
pub fn direct_loglik(s: &SampleCov, state: &FactorModelState) -> f64 {
    let omega = state.implied_covariance();
    let p = s.n_vars() as f64;
    let n = s.n_samples() as f64;
    let chol = omega.clone().cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let tr = (chol.inverse() * s.matrix()).trace();
    -0.5 * n * (logdet + tr) - 0.5 * n * p * (2.0 * std::f64::consts::PI).ln()
}

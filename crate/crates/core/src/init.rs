//! Unpenalized maximum-likelihood start and the lower-triangular rotation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, XfaError};
use crate::estep::{estep, SampleCov};
use crate::model::{FactorModelState, Loadings, ResidualVariances};
use crate::mstep::log_likelihood;

pub const DEFAULT_INIT_ITERS: usize = 50;

fn sigma_floor(spp: f64) -> f64 {
    (1e-6 * spp).max(1e-12)
}

/// Principal-axis start: top-`K` eigenvectors of `S` scaled by
/// `sqrt(max(ev - mean of the remaining eigenvalues, 0))`.
fn principal_axis_start(s: &SampleCov, k: usize) -> Result<FactorModelState> {
    let p = s.n_vars();
    let eig = SymmetricEigen::try_new(s.matrix().clone(), f64::EPSILON, 0)
        .ok_or_else(|| XfaError::Initialization("eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let residual = if k < p {
        order[k..].iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / (p - k) as f64
    } else {
        0.0
    };
    let mut l = DMatrix::zeros(p, k);
    for (j, &i) in order.iter().take(k).enumerate() {
        let scale = (eig.eigenvalues[i] - residual).max(0.0).sqrt();
        l.set_column(j, &(eig.eigenvectors.column(i) * scale));
    }
    let sig = DVector::from_fn(p, |r, _| {
        let spp = s.matrix()[(r, r)];
        (spp - l.row(r).norm_squared()).max(sigma_floor(spp))
    });
    if !l.iter().all(|v| v.is_finite()) {
        return Err(XfaError::Initialization("non-finite eigenvectors".into()));
    }
    FactorModelState::new(Loadings::new(l), ResidualVariances::new(sig)?)
}

/// Unpenalized EM started from the principal-axis solution, followed by
/// [`lower_triangular_rotate`].
pub fn mle_init(s: &SampleCov, k: usize, iters: usize) -> Result<FactorModelState> {
    mle_init_with_trace(s, k, iters).map(|(state, _)| state)
}

/// As [`mle_init`], also returning the log-likelihood before the first and
/// after every EM iteration.
pub fn mle_init_with_trace(s: &SampleCov, k: usize, iters: usize) -> Result<(FactorModelState, Vec<f64>)> {
    let p = s.n_vars();
    if k == 0 || k > p {
        return Err(XfaError::InvalidInput(format!("need 1 <= K <= P, got K = {k}, P = {p}")));
    }
    if iters == 0 {
        return Err(XfaError::InvalidInput("iters must be at least 1".into()));
    }
    let mut state = principal_axis_start(s, k)?;
    let mut trace = vec![log_likelihood(s, &state)?];
    for _ in 0..iters {
        let e = estep(s, &state, 0.0)?;
        // Lambda = Lhat Psi^-1 through the Cholesky factor of Psi.
        let mut rhs = e.lambda_hat.transpose();
        e.chol_psi.solve_lower_triangular_mut(&mut rhs);
        e.chol_psi.tr_solve_lower_triangular_mut(&mut rhs);
        let l = rhs.transpose();
        let sig = DVector::from_fn(p, |r, _| {
            let spp = s.matrix()[(r, r)];
            let v = spp - l.row(r).dot(&e.lambda_hat.row(r));
            if v.is_finite() {
                v.max(sigma_floor(spp))
            } else {
                sigma_floor(spp)
            }
        });
        if !l.iter().all(|v| v.is_finite()) {
            return Err(XfaError::Initialization("EM produced non-finite loadings".into()));
        }
        state = FactorModelState::new(Loadings::new(l), ResidualVariances::new(sig)?)?;
        trace.push(log_likelihood(s, &state)?);
    }
    state.loadings = lower_triangular_rotate(&state.loadings);
    Ok((state, trace))
}

/// Returns `L` with `L L^T = Lambda Lambda^T`, zero above the diagonal and a
/// non-negative diagonal, from the QR factorization of `Lambda^T`.
///
/// Panics if `K > P`.
pub fn lower_triangular_rotate(loadings: &Loadings) -> Loadings {
    let (p, k) = loadings.shape();
    assert!(k <= p, "lower-triangular form needs K <= P (K = {k}, P = {p})");
    let r = loadings.matrix().transpose().qr().r();
    let mut l = r.transpose();
    for j in 0..k {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
        let pivot = (j..p).map(|i| l[(i, j)]).find(|v| *v != 0.0);
        if matches!(pivot, Some(v) if v < 0.0) {
            for i in j..p {
                l[(i, j)] = -l[(i, j)];
            }
        }
    }
    Loadings::new(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estep::sample_cov;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    use crate::SeededRng;

    fn gram_gap(a: &Loadings, b: &Loadings) -> f64 {
        let ga = a.matrix() * a.matrix().transpose();
        let gb = b.matrix() * b.matrix().transpose();
        (ga - gb).amax()
    }

    fn random_orthogonal(k: usize, rng: &mut SeededRng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        m.qr().q()
    }

    #[test]
    fn hand_example() {
        let l = Loadings::new(dmatrix![0.0, 1.0; 1.0, 0.0; 1.0, 1.0]);
        let r = lower_triangular_rotate(&l);
        assert_eq!(r[(0, 1)], 0.0);
        assert!(gram_gap(&l, &r) < 1e-12);
        assert!(r[(0, 0)] >= 0.0 && r[(1, 1)] >= 0.0);
    }

    #[test]
    fn idempotent_on_lower_triangular() {
        let l = Loadings::new(dmatrix![2.0, 0.0; -0.5, 1.5; 0.3, -0.7; 0.0, 0.4]);
        let r = lower_triangular_rotate(&l);
        assert!((r.matrix() - l.matrix()).amax() < 1e-12);
    }

    #[test]
    fn invariant_to_right_rotation() {
        let mut rng = SeededRng::seed_from_u64(3);
        let l = Loadings::new(DMatrix::from_fn(12, 4, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let base = lower_triangular_rotate(&l);
        for _ in 0..10 {
            let q = random_orthogonal(4, &mut rng);
            let rotated = lower_triangular_rotate(&Loadings::new(l.matrix() * q));
            assert!((rotated.matrix() - base.matrix()).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_diagonal_uses_first_nonzero_below() {
        // Second column has L_22 = 0 after rotation; sign decided by row 3.
        let l = Loadings::new(dmatrix![1.0, 0.0; 0.0, 0.0; 0.0, -2.0]);
        let r = lower_triangular_rotate(&l);
        assert_eq!(r[(1, 1)], 0.0);
        assert!(r[(2, 1)] > 0.0);
        assert!(gram_gap(&l, &r) < 1e-12);
    }

    #[test]
    fn isotropic_null() {
        let s = SampleCov::from_matrix(DMatrix::identity(6, 6), 100).unwrap();
        let st = mle_init(&s, 1, 50).unwrap();
        assert!(st.loadings.amax() < 1e-10);
        for v in st.resid_vars.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn spiked_covariance_direction() {
        let mut rng = SeededRng::seed_from_u64(11);
        let v = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lam = v.normalize() * 3.0;
        let s = &lam * lam.transpose() + DMatrix::identity(10, 10);
        let s = SampleCov::from_matrix(s, 1000).unwrap();
        let st = mle_init(&s, 1, 50).unwrap();
        let col = st.loadings.column(0).into_owned();
        let cos = col.dot(&lam) / (col.norm() * lam.norm());
        assert!(cos.abs() > 0.99, "cos = {cos}");
        assert!(st.loadings[(0, 0)] >= 0.0);
    }

    #[test]
    fn likelihood_never_decreases() {
        let mut rng = SeededRng::seed_from_u64(19);
        for _ in 0..5 {
            let p = 15;
            let truth = DMatrix::from_fn(p, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = DMatrix::from_fn(200, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = DMatrix::from_fn(200, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = z * truth.transpose() + noise;
            let s = sample_cov(&y).unwrap();
            let (_, trace) = mle_init_with_trace(&s, 3, 50).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn rejects_too_many_factors() {
        let s = SampleCov::from_matrix(DMatrix::identity(3, 3), 10).unwrap();
        assert!(mle_init(&s, 4, 10).is_err());
        assert!(mle_init(&s, 0, 10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gram_preserved(seed in any::<u64>(), p in 1usize..200, k in 1usize..=10) {
            let k = k.min(p);
            let mut rng = SeededRng::seed_from_u64(seed);
            let l = Loadings::new(DMatrix::from_fn(p, k, |_, _| rng.sample::<f64, _>(StandardNormal)));
            let r = lower_triangular_rotate(&l);
            prop_assert!(gram_gap(&l, &r) <= 1e-10);
            for j in 0..k {
                prop_assert!(r[(j, j)] >= 0.0);
                for i in 0..j {
                    prop_assert_eq!(r[(i, j)], 0.0);
                }
            }
        }
    }
}

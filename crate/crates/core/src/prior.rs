//! Multiscale generalized double Pareto (mGDP) prior.
//!
//! Every loading in column `k` gets an independent `GDP(alpha_k, eta_k)` prior
//! with density `alpha/(2 eta) * (1 + |x|/eta)^-(alpha+1)`. The schedules for
//! `alpha_k` and `eta_k` grow the shrinkage with `k`, so later columns are
//! pushed to exact zero first.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfaError};
use crate::model::Loadings;

/// Which of the three admissible `(alpha_k, eta_k)` sequences is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// `alpha_k = delta^k`, `eta_k = rho`.
    I,
    /// `alpha_k = delta`, `eta_k = rho^k`, requires `rho < 1`.
    II,
    /// `alpha_k = delta^k`, `eta_k = rho^k`, requires `rho < delta`.
    III,
}

impl std::str::FromStr for Condition {
    type Err = XfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Condition::I),
            "II" | "2" => Ok(Condition::II),
            "III" | "3" => Ok(Condition::III),
            other => Err(XfaError::InvalidHyperparameter(format!(
                "unknown condition {other:?}, expected I, II or III"
            ))),
        }
    }
}

/// How the shape sequence grows with the sample size `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum RateVariant {
    /// Multiply `alpha_k` by `log N`.
    #[default]
    LogN,
    /// Multiply `alpha_k` by `N^(gamma/2)` with `0 < gamma < 1`.
    PowerGamma(f64),
}

/// Where a schedule came from. Absent for hand-built schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOrigin {
    pub condition: Condition,
    pub rate_variant: RateVariant,
    pub delta: f64,
    pub rho: f64,
    pub n_samples: f64,
}

/// Per-column GDP parameters `alpha_{1:K}`, `eta_{1:K}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSchedule {
    alphas: Vec<f64>,
    etas: Vec<f64>,
    origin: Option<ScheduleOrigin>,
}

impl HyperSchedule {
    /// Schedule scaled with the sample size: `alpha_k = a_k * s(N)` and
    /// `eta_k = e_k / sqrt(N)` where `(a_k, e_k)` follow `condition` and `s(N)`
    /// is `log N` or `N^(gamma/2)`. `n_samples` may be fractional.
    pub fn scaled(
        delta: f64,
        rho: f64,
        n_samples: f64,
        k: usize,
        condition: Condition,
        rate_variant: RateVariant,
    ) -> Result<Self> {
        validate_delta_rho(delta, rho, condition)?;
        if k == 0 {
            return Err(XfaError::InvalidHyperparameter("K must be positive".into()));
        }
        let growth = match rate_variant {
            RateVariant::LogN => {
                if !(n_samples.is_finite() && n_samples.ln() > 1.0) {
                    return Err(XfaError::InvalidHyperparameter(format!(
                        "log N must exceed 1, got N = {n_samples}"
                    )));
                }
                n_samples.ln()
            }
            RateVariant::PowerGamma(gamma) => {
                if !(gamma > 0.0 && gamma < 1.0) {
                    return Err(XfaError::InvalidHyperparameter(format!(
                        "gamma must lie in (0, 1), got {gamma}"
                    )));
                }
                if !(n_samples.is_finite() && n_samples >= 1.0) {
                    return Err(XfaError::InvalidHyperparameter(format!(
                        "N must be at least 1, got {n_samples}"
                    )));
                }
                n_samples.powf(gamma / 2.0)
            }
        };
        let (base_alphas, base_etas) = base_sequences(delta, rho, k, condition);
        let root_n = n_samples.sqrt();
        let alphas: Vec<f64> = base_alphas.iter().map(|a| a * growth).collect();
        let etas: Vec<f64> = base_etas.iter().map(|e| e / root_n).collect();
        let schedule = Self {
            alphas,
            etas,
            origin: Some(ScheduleOrigin {
                condition,
                rate_variant,
                delta,
                rho,
                n_samples,
            }),
        };
        schedule.check_admissible()?;
        Ok(schedule)
    }

    /// Schedule without sample-size scaling, i.e. the prior itself.
    pub fn unscaled(delta: f64, rho: f64, k: usize, condition: Condition) -> Result<Self> {
        validate_delta_rho(delta, rho, condition)?;
        let (alphas, etas) = base_sequences(delta, rho, k, condition);
        let schedule = Self {
            alphas,
            etas,
            origin: None,
        };
        schedule.check_admissible()?;
        Ok(schedule)
    }

    /// Hand-built schedule. Only `alpha_k > 2` and `eta_k > 0` are enforced.
    pub fn custom(alphas: Vec<f64>, etas: Vec<f64>) -> Result<Self> {
        if alphas.len() != etas.len() || alphas.is_empty() {
            return Err(XfaError::InvalidHyperparameter(
                "alphas and etas must be non-empty and of equal length".into(),
            ));
        }
        for (&a, &e) in alphas.iter().zip(&etas) {
            GdpParams::new(a, e)?;
        }
        Ok(Self {
            alphas,
            etas,
            origin: None,
        })
    }

    fn check_admissible(&self) -> Result<()> {
        for (k, (&a, &e)) in self.alphas.iter().zip(&self.etas).enumerate() {
            if !(a > 2.0 && a.is_finite()) || !(e > 0.0 && e.is_finite()) {
                return Err(XfaError::InvalidHyperparameter(format!(
                    "column {k}: alpha = {a}, eta = {e} is outside alpha > 2, eta > 0"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn origin(&self) -> Option<&ScheduleOrigin> {
        self.origin.as_ref()
    }

    pub fn column(&self, k: usize) -> GdpParams {
        GdpParams {
            alpha: self.alphas[k],
            eta: self.etas[k],
        }
    }
}

fn validate_delta_rho(delta: f64, rho: f64, condition: Condition) -> Result<()> {
    if !(delta > 2.0 && delta.is_finite()) {
        return Err(XfaError::InvalidHyperparameter(format!(
            "delta must exceed 2, got {delta}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(XfaError::InvalidHyperparameter(format!(
            "rho must be positive, got {rho}"
        )));
    }
    match condition {
        Condition::II if rho >= 1.0 => Err(XfaError::InvalidHyperparameter(format!(
            "condition II requires rho < 1, got {rho}"
        ))),
        Condition::III if rho >= delta => Err(XfaError::InvalidHyperparameter(format!(
            "condition III requires rho < delta, got rho = {rho}, delta = {delta}"
        ))),
        _ => Ok(()),
    }
}

fn base_sequences(delta: f64, rho: f64, k: usize, condition: Condition) -> (Vec<f64>, Vec<f64>) {
    (1..=k as i32)
        .map(|j| match condition {
            Condition::I => (delta.powi(j), rho),
            Condition::II => (delta, rho.powi(j)),
            Condition::III => (delta.powi(j), rho.powi(j)),
        })
        .unzip()
}

/// Build the sample-size-scaled schedule used for fitting.
pub fn make_schedule(
    delta: f64,
    rho: f64,
    n_samples: usize,
    k: usize,
    condition: Condition,
    rate_variant: RateVariant,
) -> Result<HyperSchedule> {
    HyperSchedule::scaled(delta, rho, n_samples as f64, k, condition, rate_variant)
}

/// Parameters of a single `GDP(alpha, eta)` density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdpParams {
    alpha: f64,
    eta: f64,
}

impl GdpParams {
    pub fn new(alpha: f64, eta: f64) -> Result<Self> {
        if !(alpha > 2.0 && alpha.is_finite()) {
            return Err(XfaError::InvalidHyperparameter(format!(
                "GDP shape must exceed 2 for a finite variance, got {alpha}"
            )));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(XfaError::InvalidHyperparameter(format!(
                "GDP scale must be positive, got {eta}"
            )));
        }
        Ok(Self { alpha, eta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

pub fn gdp_log_density(x: f64, params: GdpParams) -> f64 {
    let GdpParams { alpha, eta } = params;
    (alpha / (2.0 * eta)).ln() - (alpha + 1.0) * (x.abs() / eta).ln_1p()
}

/// `2 eta^2 / ((alpha - 1)(alpha - 2))`.
pub fn gdp_variance(params: GdpParams) -> f64 {
    let GdpParams { alpha, eta } = params;
    2.0 * eta * eta / ((alpha - 1.0) * (alpha - 2.0))
}

/// One draw through the scale mixture `xi ~ Gamma(alpha, rate eta)`,
/// `tau ~ Exp(rate xi^2 / 2)`, `x ~ Normal(0, tau)`.
pub fn gdp_sample<R: Rng + ?Sized>(params: GdpParams, rng: &mut R) -> f64 {
    let GdpParams { alpha, eta } = params;
    let xi = Gamma::new(alpha, 1.0 / eta)
        .expect("validated GDP shape and scale")
        .sample(rng);
    let tau = Exp::new(0.5 * xi * xi)
        .expect("positive exponential rate")
        .sample(rng);
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    z * tau.sqrt()
}

/// Sum of [`gdp_log_density`] over every cell, column `k` using `schedule.column(k)`.
pub fn mgdp_log_density(loadings: &Loadings, schedule: &HyperSchedule) -> Result<f64> {
    if schedule.len() < loadings.n_factors() {
        return Err(XfaError::DimensionMismatch(format!(
            "schedule has {} columns, loadings have {}",
            schedule.len(),
            loadings.n_factors()
        )));
    }
    let mut total = 0.0;
    for k in 0..loadings.n_factors() {
        let params = schedule.column(k);
        total += loadings
            .column(k)
            .iter()
            .map(|&x| gdp_log_density(x, params))
            .sum::<f64>();
    }
    Ok(total)
}

/// Truncation level `K0` with `P{ d_inf(Omega, Omega^K0) < eps } >= 1 - eps`.
///
/// Returns `ceil(log(P^2 / eps^2) / (2 log b))` with `b = delta`, `1/rho` or
/// `delta/rho` for conditions I, II and III. The leading constant is 1.
pub fn compute_k0(
    n_vars: usize,
    delta: f64,
    rho: f64,
    condition: Condition,
    epsilon: f64,
) -> Result<usize> {
    compute_k0_real(n_vars as f64, delta, rho, condition, epsilon)
}

/// [`compute_k0`] for a real-valued dimension.
pub fn compute_k0_real(
    n_vars: f64,
    delta: f64,
    rho: f64,
    condition: Condition,
    epsilon: f64,
) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(XfaError::InvalidHyperparameter(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if !(n_vars >= 1.0) {
        return Err(XfaError::InvalidHyperparameter("P must be at least 1".into()));
    }
    let base = match condition {
        Condition::I => delta,
        Condition::II => 1.0 / rho,
        Condition::III => delta / rho,
    };
    if !(base > 1.0 && base.is_finite()) {
        return Err(XfaError::InvalidHyperparameter(format!(
            "truncation base must exceed 1, got {base}"
        )));
    }
    let numerator = (n_vars * n_vars / (epsilon * epsilon)).ln();
    let k0 = (numerator / (2.0 * base.ln())).ceil();
    Ok(k0.max(1.0) as usize)
}

/// Draw a `P x K` loadings matrix from the mGDP prior with the given schedule.
pub fn sample_loadings<R: Rng + ?Sized>(
    n_vars: usize,
    schedule: &HyperSchedule,
    rng: &mut R,
) -> Loadings {
    let k = schedule.len();
    let mut m = DMatrix::zeros(n_vars, k);
    for col in 0..k {
        let params = schedule.column(col);
        for p in 0..n_vars {
            m[(p, col)] = gdp_sample(params, rng);
        }
    }
    Loadings::new(m)
}

/// `max_ij |sum_{k >= k0} lambda_ik lambda_jk|`, the sup-norm distance between
/// `Omega` and its rank-`k0` truncation. The tail Gram matrix is positive
/// semidefinite, so its largest absolute entry sits on the diagonal.
pub fn truncation_distance(loadings: &Loadings, k0: usize) -> f64 {
    let k0 = k0.min(loadings.n_factors());
    (0..loadings.n_vars())
        .map(|p| {
            (k0..loadings.n_factors())
                .map(|k| loadings[(p, k)].powi(2))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

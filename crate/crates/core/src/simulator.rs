//! Synthetic factor-model scenarios with known truth.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfaError};
use crate::model::{Loadings, ResidualVariances};
use crate::SeededRng;

/// Rows per column carrying a nonzero loading under [`Sparsity::Sparse`].
pub const SPARSE_SUPPORT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sparsity {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Snr {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthPrior {
    Mgp,
    Uniform,
}

impl FromStr for TruthPrior {
    type Err = XfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mgp" => Ok(Self::Mgp),
            "uniform" => Ok(Self::Uniform),
            other => Err(XfaError::InvalidInput(format!("unknown truth prior '{other}' (expected mgp or uniform)"))),
        }
    }
}

/// `sparse-high`, `dense-high`, `dense-low`, `sparse-low`.
pub fn parse_scenario(s: &str) -> Result<(Sparsity, Snr)> {
    let lower = s.to_ascii_lowercase();
    let (a, b) = lower
        .split_once(['-', '_'])
        .ok_or_else(|| XfaError::InvalidInput(format!("scenario '{s}' should look like sparse-high")))?;
    let sparsity = match a {
        "sparse" => Sparsity::Sparse,
        "dense" => Sparsity::Dense,
        _ => return Err(XfaError::InvalidInput(format!("unknown sparsity '{a}'"))),
    };
    let snr = match b {
        "high" => Snr::High,
        "low" => Snr::Low,
        _ => return Err(XfaError::InvalidInput(format!("unknown SNR level '{b}'"))),
    };
    Ok((sparsity, snr))
}

impl fmt::Display for Sparsity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sparse => "sparse",
            Self::Dense => "dense",
        })
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::High => "high",
            Self::Low => "low",
        })
    }
}

/// Distribution constants for the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthSettings {
    /// Shape of `zeta_1 ~ Gamma(a1, 1)`.
    pub mgp_first_shape: f64,
    /// Shape of `zeta_l ~ Gamma(a2, 1)` for `l > 1`.
    pub mgp_rest_shape: f64,
    /// `phi_pk ~ Gamma(nu, rate nu)`.
    pub mgp_local_shape: f64,
    pub uniform_range: (f64, f64),
    pub resid_range: (f64, f64),
    /// Minimum column SNR under [`Snr::High`].
    pub high_snr: f64,
    /// Maximum column SNR under [`Snr::Low`].
    pub low_snr: f64,
}

impl Default for TruthSettings {
    fn default() -> Self {
        Self {
            mgp_first_shape: 2.0,
            mgp_rest_shape: 3.0,
            mgp_local_shape: 1.5,
            uniform_range: (0.6, 1.4),
            resid_range: (0.5, 1.5),
            high_snr: 4.0,
            low_snr: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub sparsity: Sparsity,
    pub snr: Snr,
    pub truth_prior: TruthPrior,
    pub n_vars: usize,
    pub n_factors: usize,
    /// Defaults to `ceil(P ln P)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub truth: TruthSettings,
}

impl ScenarioSpec {
    pub fn new(sparsity: Sparsity, snr: Snr, truth_prior: TruthPrior, n_vars: usize, n_factors: usize, seed: u64) -> Self {
        Self {
            sparsity,
            snr,
            truth_prior,
            n_vars,
            n_factors,
            n_samples: None,
            seed,
            truth: TruthSettings::default(),
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.n_samples = Some(n);
        self
    }

    pub fn samples(&self) -> usize {
        self.n_samples.unwrap_or_else(|| default_samples(self.n_vars))
    }

    pub fn validate(&self) -> Result<()> {
        let (p, k) = (self.n_vars, self.n_factors);
        if p == 0 || k == 0 {
            return Err(XfaError::InvalidInput("P and K must be positive".into()));
        }
        if k > p {
            return Err(XfaError::InvalidInput(format!("K = {k} exceeds P = {p}")));
        }
        if self.sparsity == Sparsity::Sparse && p < k + SPARSE_SUPPORT - 1 {
            return Err(XfaError::InvalidInput(format!(
                "sparse scenario requires P >= K + 9 (P = {p}, K = {k})"
            )));
        }
        if self.samples() < 2 {
            return Err(XfaError::InvalidInput("N must be at least 2".into()));
        }
        let t = &self.truth;
        let shapes = [t.mgp_first_shape, t.mgp_rest_shape, t.mgp_local_shape, t.high_snr, t.low_snr];
        if shapes.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(XfaError::InvalidInput("truth settings must be positive".into()));
        }
        for (name, (a, b)) in [("uniform_range", t.uniform_range), ("resid_range", t.resid_range)] {
            if !(a > 0.0 && b > a && b.is_finite()) {
                return Err(XfaError::InvalidInput(format!("{name} must satisfy 0 < a < b")));
            }
        }
        Ok(())
    }
}

/// `ceil(P ln P)`, at least 2.
pub fn default_samples(n_vars: usize) -> usize {
    let p = n_vars as f64;
    ((p * p.ln()).ceil() as usize).max(2)
}

/// Rows of column `k` (0-based) that may be nonzero.
pub fn support_rows(sparsity: Sparsity, n_vars: usize, k: usize) -> std::ops::Range<usize> {
    match sparsity {
        Sparsity::Sparse => k..(k + SPARSE_SUPPORT).min(n_vars),
        Sparsity::Dense => k..n_vars,
    }
}

/// Mean squared loading over each column's support divided by the mean
/// residual variance.
pub fn column_snr(loadings: &Loadings, resid_vars: &ResidualVariances) -> Vec<f64> {
    let noise = resid_vars.mean();
    (0..loadings.n_factors())
        .map(|k| {
            let col = loadings.column(k);
            let support: Vec<f64> = col.iter().copied().filter(|v| *v != 0.0).collect();
            if support.is_empty() {
                0.0
            } else {
                support.iter().map(|v| v * v).sum::<f64>() / support.len() as f64 / noise
            }
        })
        .collect()
}

/// Unscaled draw of the truth's magnitudes on its support.
fn draw_raw_loadings<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> DMatrix<f64> {
    let (p, k) = (spec.n_vars, spec.n_factors);
    let t = &spec.truth;
    let mut l = DMatrix::zeros(p, k);
    match spec.truth_prior {
        TruthPrior::Mgp => {
            let first = Gamma::new(t.mgp_first_shape, 1.0).expect("validated shape");
            let rest = Gamma::new(t.mgp_rest_shape, 1.0).expect("validated shape");
            let local = Gamma::new(t.mgp_local_shape, 1.0 / t.mgp_local_shape).expect("validated shape");
            let mut tau = 1.0;
            for col in 0..k {
                tau *= if col == 0 { first.sample(rng) } else { rest.sample(rng) };
                for row in support_rows(spec.sparsity, p, col) {
                    let phi: f64 = local.sample(rng);
                    let z: f64 = rng.sample(StandardNormal);
                    l[(row, col)] = z / (phi * tau).sqrt();
                }
            }
        }
        TruthPrior::Uniform => {
            let (a, b) = t.uniform_range;
            let mag = Uniform::new(a, b).expect("validated range");
            for col in 0..k {
                for row in support_rows(spec.sparsity, p, col) {
                    let v = mag.sample(rng);
                    l[(row, col)] = if rng.random_bool(0.5) { v } else { -v };
                }
            }
        }
    }
    l
}

/// Ground-truth loadings with the scenario's support and SNR regime. A single
/// common scale factor is applied so the column ordering of MGP draws is kept.
pub fn simulate_loadings<R: Rng + ?Sized>(spec: &ScenarioSpec, resid_vars: &ResidualVariances, rng: &mut R) -> Result<Loadings> {
    spec.validate()?;
    let mut l = Loadings::new(draw_raw_loadings(spec, rng));
    let snr = column_snr(&l, resid_vars);
    let scale2 = match spec.snr {
        Snr::High => {
            let min = snr.iter().copied().fold(f64::INFINITY, f64::min);
            if min < spec.truth.high_snr { spec.truth.high_snr / min } else { 1.0 }
        }
        Snr::Low => {
            let max = snr.iter().copied().fold(0.0, f64::max);
            if max > spec.truth.low_snr { spec.truth.low_snr / max } else { 1.0 }
        }
    };
    if !scale2.is_finite() {
        return Err(XfaError::Numerical("degenerate truth draw".into()));
    }
    *l.matrix_mut() *= scale2.sqrt();
    Ok(l)
}

/// Residual variances drawn uniformly from the configured range.
pub fn simulate_resid<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> ResidualVariances {
    let (a, b) = spec.truth.resid_range;
    let dist = Uniform::new(a, b).expect("validated range");
    ResidualVariances::new(DVector::from_fn(spec.n_vars, |_, _| dist.sample(rng))).expect("positive range")
}

/// `N x P` matrix with rows `Lambda z + e`, `z ~ N(0, I)`, `e ~ N(0, Sigma)`.
pub fn simulate_data<R: Rng + ?Sized>(loadings: &Loadings, resid_vars: &ResidualVariances, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let (p, k) = loadings.shape();
    if resid_vars.len() != p {
        return Err(XfaError::DimensionMismatch(format!(
            "loadings have {p} rows, {} residual variances",
            resid_vars.len()
        )));
    }
    let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sd: Vec<f64> = resid_vars.iter().map(|v| v.sqrt()).collect();
    let noise = DMatrix::from_fn(n, p, |_, j| sd[j] * rng.sample::<f64, _>(StandardNormal));
    Ok(z * loadings.matrix().transpose() + noise)
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub spec: ScenarioSpec,
    pub loadings: Loadings,
    pub resid_vars: ResidualVariances,
    pub data: DMatrix<f64>,
}

impl SimulatedDataset {
    /// Residual variances, loadings, then data, all from one stream seeded by
    /// `spec.seed`.
    pub fn generate(spec: &ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::seed_from_u64(spec.seed);
        let resid_vars = simulate_resid(spec, &mut rng);
        let loadings = simulate_loadings(spec, &resid_vars, &mut rng)?;
        let data = simulate_data(&loadings, &resid_vars, spec.samples(), &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            loadings,
            resid_vars,
            data,
        })
    }
}

//! Expandable factor analysis.
//!
//! Maximum-a-posteriori estimation of a sparse, low-rank loadings matrix and
//! diagonal residual variances under a multiscale generalized double Pareto
//! (mGDP) prior. Each EM iteration reduces to `P` independent weighted-lasso
//! problems in `K` dimensions, solved by coordinate descent. A grid over the
//! prior's `(rho, delta)` hyperparameters is fitted with warm starts and the
//! fits are combined by Bayesian model averaging with Laplace-approximated
//! marginal likelihoods.
//!
//! Module map:
//!
//! * [`prior`]: hyperparameter schedules, GDP densities, sampling, truncation level.
//! * [`estep`]: sample covariance and the conditional expectations of the E-step.
//! * [`mstep`]: coordinate descent for the loadings, residual variance update,
//!   log-posterior objective and the single-model fit driver.
//! * [`init`]: unpenalized maximum-likelihood start and lower-triangular rotation.
//! * [`bma`]: grid fitting, Laplace marginals, model weights, averaging, intervals.
//! * [`simulator`]: synthetic scenarios with known truth.
//! * [`metrics`]: CNNL, CPEV, RMSE and factor-count selection.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bma;
pub mod error;
pub mod estep;
pub mod init;
pub mod metrics;
pub mod model;
pub mod mstep;
pub mod prior;
pub mod simulator;

pub use bma::{GridCell, GridResult, GridSpec};
pub use error::{Result, XfaError};
pub use estep::{EStepQuantities, SampleCov};
pub use model::{FactorModelState, Loadings, ResidualVariances};
pub use mstep::{FitOptions, ModelFit};
pub use prior::{Condition, GdpParams, HyperSchedule, RateVariant};
pub use simulator::{ScenarioSpec, SimulatedDataset, Snr, Sparsity, TruthPrior};

/// Deterministic generator used everywhere a seed is accepted.
pub type SeededRng = rand_chacha::ChaCha8Rng;

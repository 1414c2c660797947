//! Shared fixtures for the benchmarks.

use xfa_core::estep::{sample_cov, SampleCov};
use xfa_core::init::{mle_init, DEFAULT_INIT_ITERS};
use xfa_core::mstep::fit_one;
use xfa_core::prior::make_schedule;
use xfa_core::{Condition, FactorModelState, FitOptions, HyperSchedule, RateVariant, ScenarioSpec, SimulatedDataset, Snr, Sparsity, TruthPrior};

pub struct Fixture {
    pub s: SampleCov,
    pub init: FactorModelState,
    /// A converged fit at `schedule`, the state every timed iteration starts from.
    pub warm: FactorModelState,
    pub schedule: HyperSchedule,
}

/// Sparse-High data with five true factors fitted with `k_max` columns.
pub fn fixture(p: usize, k_max: usize, n: usize) -> Fixture {
    let spec = ScenarioSpec::new(Sparsity::Sparse, Snr::High, TruthPrior::Mgp, p, 5, 11).with_samples(n);
    let d = SimulatedDataset::generate(&spec).expect("valid scenario");
    let s = sample_cov(&d.data).expect("finite data");
    let init = mle_init(&s, k_max, DEFAULT_INIT_ITERS).expect("initializer");
    let schedule = make_schedule(3.0, 1.0, n, k_max, Condition::I, RateVariant::LogN).expect("valid schedule");
    let warm = fit_one(&s, &init, &init.loadings, &schedule, &FitOptions::default())
        .expect("fit")
        .state;
    Fixture { s, init, warm, schedule }
}

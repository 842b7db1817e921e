//! Sequential change-point detection for hidden Markov models.
//!
//! The crate builds up in layers:
//!
//! - [`hmm`]: finite-state models with Gaussian or AR(1)-Gaussian emissions,
//!   validation, and change-scenario sampling.
//! - [`likelihood`]: the normalized matrix-product filter producing
//!   log-likelihood-ratio increments, with a brute-force path-sum oracle.
//! - [`detect`]: SRP, CUSUM and Shiryaev stopping rules over the increment
//!   stream, plus the particle estimate of the SRP quasi-stationary start.
//! - [`oc`]: Monte Carlo operating characteristics (run length, detection
//!   delay, threshold calibration, rule comparison).
//! - [`renewal`]: simulation estimators for every constant in the
//!   second-order expansion of the expected detection delay, and a generic
//!   first-passage laboratory for perturbed Markov random walks.
//!
//! All Monte Carlo machinery draws from counter-derived RNG streams
//! ([`rng::trial_rng`]), so estimates are reproducible bit for bit across
//! thread counts and scheduling.

pub mod detect;
pub mod error;
pub mod hmm;
pub mod likelihood;
pub mod oc;
pub mod renewal;
pub mod rng;
pub mod walk;

pub use detect::{
    AlarmReport, Detector, DetectorConfig, DetectorKind, InitPolicy, QuasiStationaryDist,
};
pub use error::{Error, Result};
pub use hmm::{ChangePoint, ChangeScenario, EmissionFamily, EmissionSpec, HmmParams, SamplePath};
pub use likelihood::FilterPair;
pub use oc::{Calibration, ComparisonTable, DelayEstimate, McEstimate};
pub use renewal::{
    DeltaEstimate, EtaEstimate, ExpansionConstants, KlEstimate, OvershootSummary,
};
pub use walk::{HmmLogLrWalk, MarkovWalk};

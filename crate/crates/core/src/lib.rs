//! Covariance operator reconstruction for Gaussian random fields.
//!
//! The pipeline samples a field on a P1 finite element space, estimates the
//! nodal covariance matrix (plain or tapered), solves the generalized
//! eigenproblem against the mass matrix, and rebuilds a truncated Mercer
//! kernel whose error is split into truncation, discretization and sampling
//! parts. The [`planner`] module turns a target accuracy into discretization
//! parameters.

pub mod calibration;
pub mod error;
pub mod estimator;
pub mod fem;
pub mod field;
pub mod linalg;
pub mod mercer;
pub mod planner;
pub mod quadrature;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod study;

pub use calibration::Calibration;
pub use error::{Error, Result};
pub use estimator::{EstimatorKind, TaperedCovariance};
pub use fem::{FeSpace, MassMatrix, Mesh};
pub use field::{AnalyticField, FieldKind, KlOracle, SampleBatch, SamplingMode};
pub use mercer::{ErrorReport, MercerKernel};
pub use planner::{PlanResult, Regime, SpectralProfile};
pub use spectral::{DiscreteSpectrum, SpectralDiagnostics, StiffnessSource, TransformedStiffness};
pub use study::{StudyConfig, StudyRow};

/// Library version embedded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
/// Output order always matches index order.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

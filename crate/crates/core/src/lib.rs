//! Bayesian claim-frequency model for motor insurance: data ingest, spline
//! exposure basis, spatial graph and CAR prior, log posterior with gradient,
//! NUTS and baseline samplers, convergence diagnostics and synthetic data.

pub mod data;
pub mod diagnostics;
pub mod posterior;
pub mod sampler;
pub mod scalar;
pub mod spatial;
pub mod spline;
pub mod synthetic;

pub use data::{DataError, Dataset};
pub use diagnostics::{DiagnosticsError, DiagnosticsReport};
pub use posterior::{LogDensity, ModelInputs, PosteriorError};
pub use sampler::{nuts_sample, SamplerConfig, SamplerError};
pub use spatial::{AdjacencyGraph, SpatialError};
pub use spline::{SplineBasis, SplineError};
pub use synthetic::{SyntheticError, SyntheticSpec};

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Linear ensemble transform filters: SIR, EnKF, ESRF, ETPF and their
//! localized variants, written as `Zᵃ = Zᶠ S` with an `M × M` transform `S`.
//!
//! Everything is generic over the scalar through [`Real`]; the aliases at
//! the crate root fix it to `f64`.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod filters;
pub mod linalg;
pub mod localization;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod transport;

pub use diagnostics::{
    convergence_fit, convergence_slope, rmse_time_average, spatial_correlation, RmseKind, SlopeFit,
};
pub use error::{Error, Result};
pub use filters::{AnalysisDiagnostics, AnalysisTransform, EtpfOptions, RejuvenationCovariance};
pub use localization::{GridGeometry, KernelKind, LocalizationConfig};
pub use models::{FlowMap, FlowMapConfig, OdeModel};
pub use rng::RngStream;
pub use scalar::{LpValue, Real};

pub type Ensemble = ensemble::Ensemble<f64>;
pub type WeightVector = ensemble::WeightVector<f64>;
pub type TransformMatrix = ensemble::TransformMatrix<f64>;
pub type ObservationModel = ensemble::ObservationModel<f64>;
pub type ForwardMap = ensemble::ForwardMap<f64>;
pub type AnalysisResult = filters::AnalysisResult<f64>;
pub type CouplingMatrix = transport::CouplingMatrix<f64>;
pub type Lorenz63 = models::Lorenz63<f64>;
pub type Lorenz96 = models::Lorenz96<f64>;
pub type TrajectoryRecord = diagnostics::TrajectoryRecord<f64>;

//! Discrete optimal transport between weighted ensembles.

mod coupling;
mod gaussian;
mod monotonicity;
mod simplex;
mod sinkhorn;

pub use coupling::{
    coupling_to_transform, CostMatrix, CouplingMatrix, SquaredEuclidean, TransportCost,
};
pub use gaussian::gaussian_optimal_map;
pub use monotonicity::{
    check_cyclical_monotonicity, coupling_support, MonotonicityReport, EXHAUSTIVE_LIMIT,
};
pub use simplex::{solve_optimal_coupling, OptimalCoupling};
pub use sinkhorn::{sinkhorn_coupling, SinkhornOptions};

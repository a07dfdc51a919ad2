//! Experiment runner for the `letf` filters: Lorenz-63/96 twin experiments,
//! parameter sweeps, the QMC single-step convergence study and path-space
//! samplers for the initial condition.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod qmc;
pub mod smoother;
pub mod sweep;
pub mod twin;

pub use config::{ExperimentConfig, FilterKind};
pub use qmc::{halton_points, qmc_single_step_experiment, QmcConfig, QmcReport};
pub use smoother::{mcmc_path_sampler, path_importance_sampler, run_smoother, SmootherConfig};
pub use sweep::{run_sweep, SweepResult};
pub use twin::{run_twin_experiment, RunSummary, TwinRun};

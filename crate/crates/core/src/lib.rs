//! Interaction-action minimization for particle path ensembles, the
//! associated generalized Vlasov flow, and the relaxed energy over
//! martingale velocity kernels.

pub mod action;
pub mod error;
pub mod lbfgs;
pub mod model;
pub mod nbody;
pub mod ot_hjb;
pub mod potentials;
pub mod relaxation;
pub mod vlasov;
pub mod wasserstein;

pub use error::{MfaError, Result};
pub use model::{
    apply_kernel, is_martingale, moment, statistic_at_interval, DiscreteStatistic,
    EndpointCoupling, PathEnsemble, PhasePoint, TimeGrid, VelocityKernel,
};

//! Moment-equation simulator and local phase-synchronization criteria for two
//! mechanical oscillators coupled through a driven optical cavity.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the scenarios and the CLI use.

// `!(x > 0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod hl_dynamics;
pub mod linalg;
pub mod mode_picture;
pub mod ode;
pub mod quadrature_state;
pub mod scalar;
pub mod scenario;
pub mod sync_criteria;
pub mod uncertainty_oracle;

pub use scalar::Real;

pub type Params = quadrature_state::SystemParams<f64>;
pub type Mean = quadrature_state::MeanState<f64>;
pub type Cov = quadrature_state::CovMatrix<f64, 6>;
pub type MechCov = quadrature_state::CovMatrix<f64, 4>;
pub type Frame = quadrature_state::PhaseFrame<f64>;
pub type Report = sync_criteria::SyncReport<f64>;
pub type Mixture = mode_picture::CoherentMixture<f64>;
pub type CmSpec = uncertainty_oracle::RandomCmSpec<f64>;

pub type ParamsF32 = quadrature_state::SystemParams<f32>;
pub type MeanF32 = quadrature_state::MeanState<f32>;
pub type CovF32 = quadrature_state::CovMatrix<f32, 6>;
pub type MechCovF32 = quadrature_state::CovMatrix<f32, 4>;

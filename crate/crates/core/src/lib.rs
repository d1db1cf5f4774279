//! Rank-constrained Poisson log-normal model (PLN-PCA) fitted by projected
//! stochastic gradient descent with self-normalized importance sampling.

// `!(x > 0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod proposal;
pub mod quadrature;
pub mod scalar;
pub mod snis;
pub mod vem;

pub use error::{Error, Result};
pub use model::{Dataset, Individual, LatentPoint, ModelParams, ParamGradient};
pub use optimizer::{BatchPhase, ConstraintSet, FitTrace, OptConfig, TraceRecord};
pub use proposal::{GaussianMixtureProposal, ProposalKind};
pub use quadrature::QuadratureRule;
pub use scalar::Real;
pub use snis::WeightedParticles;
pub use vem::{VariationalParams, VemConfig};

pub type ModelParams64 = ModelParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type ParamGradient64 = ParamGradient<f64>;
pub type Proposal64 = GaussianMixtureProposal<f64>;
pub type Proposal32 = GaussianMixtureProposal<f32>;
pub type VariationalParams64 = VariationalParams<f64>;
pub type ConstraintSet64 = ConstraintSet<f64>;

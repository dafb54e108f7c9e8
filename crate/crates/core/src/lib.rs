//! Face-voice association toolkit: latent projection and alignment,
//! attention-gated fusion, the weighted three-term training objective,
//! two-phase AdamW training with cosine annealing, and EER-based
//! cross-language verification, plus a synthetic multilingual benchmark
//! generator so the whole pipeline can be exercised on one CPU core.
//!
//! The numeric core is generic over [`Scalar`] (f32 or f64); the aliases
//! at the crate root pin the f64 instantiation used by the CLI and tests.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod scalar;
pub mod selfcheck;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type the toolkit computes with by default.
pub type Real = f64;
pub type Tensor64 = tensor::Tensor<Real>;
pub type Tape64 = tape::Tape<Real>;
pub type RfopParams64 = model::RfopParams<Real>;
pub type LossWeights64 = loss::LossWeights<Real>;
pub type AdamW64 = optim::AdamW<Real>;
pub type CosineSchedule64 = optim::CosineSchedule<Real>;
pub type TrainPlan64 = train::TrainPlan<Real>;
pub type Trial64 = metrics::Trial<Real>;

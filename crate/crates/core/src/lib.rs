//! Desk-scale laboratory for low-rank adapter initialization.
//!
//! The crate provides, bottom up:
//! - dense matrices with reverse-mode differentiation and a
//!   finite-difference oracle ([`tensor`], [`autodiff`], [`gradcheck`]);
//! - LoRA factor pairs, initialization schemes, and bit-exact checkpoints
//!   ([`lora`], [`model`]);
//! - gradient-subspace diagnostics: tangent projection, information-loss
//!   decomposition, and activation-mask gradient differences ([`geometry`]);
//! - boundary-matching adapter initialization: pre-activation capture,
//!   sign masks, the weighted squared-hinge objective and its matching
//!   optimizer ([`abm`]);
//! - adapter fine-tuning with per-step information-loss probes ([`train`]);
//! - seeded synthetic tasks and pretrain/fine-tune scenarios ([`tasks`],
//!   [`scenario`]).
//!
//! The numeric layers are generic over [`scalar::Scalar`]; the experiment
//! layers run on the `f64` aliases below.

pub mod abm;
pub mod activation;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod scenario;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod util;

pub use activation::Activation;
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type of the experiment layer.
pub type Real = f64;
/// Dense matrix over [`Real`].
pub type Tensor = tensor::Tensor2<Real>;
/// Adapter over [`Real`].
pub type Adapter = lora::LoraAdapter<Real>;
/// Model over [`Real`].
pub type Model = model::MlpModel<Real>;
/// Computation graph over [`Real`].
pub type GraphR = autodiff::Graph<Real>;

//! Sequence-level classification of immune repertoires trained from
//! repertoire-level labels, with asymmetric self-adaptive label correction
//! and co-training.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below name the common instantiations.

pub mod data;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod kv;
pub mod nn;
pub mod robust;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};

pub type ModelStateF32 = nn::ModelState<f32>;
pub type ModelStateF64 = nn::ModelState<f64>;
pub type TargetTableF32 = robust::TargetTable<f32>;
pub type TargetTableF64 = robust::TargetTable<f64>;
pub type FitResultF32 = robust::FitResult<f32>;
pub type FitResultF64 = robust::FitResult<f64>;
pub type CheckpointF32 = nn::Checkpoint<f32>;
pub type CheckpointF64 = nn::Checkpoint<f64>;

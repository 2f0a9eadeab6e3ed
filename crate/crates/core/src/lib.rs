//! Desk-scale engine for multimodal dataset distillation with low-rank
//! similarity mining.
//!
//! The pipeline: generate (or import) a paired-embedding dataset, train
//! expert trajectories with InfoNCE, distill a small synthetic dataset plus
//! a factorized ground-truth similarity matrix by trajectory matching, and
//! evaluate by training fresh retrieval models on the synthetic data.

pub mod analysis;
pub mod coreset;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod expert;
pub mod format;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod lors;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Prompt-set aggregation and adaptation over frozen encoder embeddings.
//!
//! The pipeline aggregates a class's reference prompt embeddings into a
//! single target vector with a reward-trained attention block, distills that
//! target into an image-conditioned generator, and fuses the generator's
//! output with per-class template embeddings for classification and
//! retrieval. Everything runs on a small reverse-mode autodiff kernel over
//! dense `f64` tensors; datasets are synthetic, planted constructions whose
//! geometry is known in closed form.

pub mod adapt;
pub mod aggregate;
pub mod config;
pub mod diffcore;
pub mod embedio;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod train;

pub use error::{Error, Result};

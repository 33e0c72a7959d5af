//! Consistency-pretrained self-attention teachers distilled into lightweight
//! sequential recommenders.
//!
//! The pipeline has four stages:
//!
//! 1. [`data`] ingests interaction logs, filters and splits them, and builds
//!    the corrupted batches used by the self-supervised tasks.
//! 2. [`ssl`] pretrains three independent teacher encoders ([`encoder`]) with
//!    a cloze objective plus one consistency task each: temporal order
//!    detection, persona (same-user) detection, and a global/local
//!    mutual-information bound.
//! 3. [`imitation`] distills the frozen teachers into a [`student`] model via
//!    prediction-distribution KL and representation MSE with learnable,
//!    regularized teacher weights.
//! 4. [`eval`] ranks the held-out item against 99 sampled negatives and
//!    reports Recall@k / NDCG@k.
//!
//! Everything differentiable runs on the small reverse-mode tape in
//! [`numerics`], which is gradient-checked against central finite differences.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod imitation;
pub mod numerics;
pub mod ssl;
pub mod student;

pub use error::{Error, Result};

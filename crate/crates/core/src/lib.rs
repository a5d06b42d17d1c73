//! Tri-modal gated-attention fusion with modality-invariant alignment.
//!
//! The crate is self-contained: a reverse-mode autodiff tensor core, the
//! fusion model built on it (projection + transformer frontend, gated
//! pairwise cross-attention for modality-specific features, shared-query
//! generators with a symmetric-KL alignment penalty for modality-invariant
//! features, classification head), a synthetic tri-modal data generator
//! with a binary feature-file format, and an Adam training harness with
//! per-epoch metrics.

pub mod adam;
pub mod encoder;
pub mod gia;
pub mod gmic;
pub mod gradcheck;
pub mod head;
pub mod mig;
pub mod model;
pub mod param;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{ModelConfig, MsrMode};
pub use real::Real;
pub use synth::{Dataset, Modality, Seq, SynthSpec};
pub use train::{MetricsRecord, TrainConfig};

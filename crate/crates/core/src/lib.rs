//! Sample-adaptive attention for silhouette-based gait recognition.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: a dense `f64` tensor and a tape-based
//!   reverse-mode differentiation engine with a small, fixed op vocabulary.
//! - [`mhn`]: the hypernetwork that turns pooled input statistics into the
//!   weights of a calibration network.
//! - [`mta`]: triple attention (spatial / channel / temporal) with a global
//!   bottleneck stream, multi-kernel local streams and a soft gate.
//! - [`mtp`]: temporal pooling that fuses mean, max and GeM pooling with
//!   sample-adaptive weights.
//! - [`model`]: backbone, heads, objective, optimiser and checkpoints.
//! - [`data`] and [`eval`]: silhouette datasets, a synthetic walker
//!   generator and the cross-view recognition protocol.
//!
//! With the default `parallel` feature the heavy kernels and per-clip
//! work fan out over rayon; without it everything runs on the calling
//! thread. Both paths produce bitwise identical results.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mhn;
pub mod model;
pub mod mta;
pub mod mtp;
pub mod par;
pub mod params;
pub mod tensor;

pub use autograd::{grad_check, Gradients, Trace, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

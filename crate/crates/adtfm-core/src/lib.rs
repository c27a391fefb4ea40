//! Incipient-fault classification for power-distribution waveforms.
//!
//! The crate builds up from a small reverse-mode autodiff tape over dense
//! `f64` tensors to a full recurrent classifier whose cell embeds an
//! adaptive Morlet wavelet transform, plus everything needed around it:
//! attention pooling, Adam training, physics-based waveform synthesis,
//! dataset tooling, the two augmentation operators (phase switching and
//! temporal sliding), and classification metrics.
//!
//! Modules:
//! - [`tensor`] / [`tape`] / [`gradcheck`] — dense tensors, the Wengert
//!   tape, and finite-difference verification.
//! - [`wavelet`] — adaptive Morlet coefficients with learned scale and
//!   translation.
//! - [`cell`] — the time-frequency memory cell (joint forget gate, input
//!   gate, wavelet-modulated state update, output gate).
//! - [`model`] — stacked cells, attention pooling, classifier head,
//!   checkpoint serialization.
//! - [`train`] — cross-entropy, Adam, the training loop.
//! - [`simulate`] — transient circuit model and synthetic dataset generator.
//! - [`augment`] — phase switching and temporal sliding.
//! - [`data`] — dataset CSV format, packetization, normalization, splits.
//! - [`metrics`] — confusion matrix, precision/recall/F1, ROC, AUC.

pub mod augment;
pub mod cell;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
mod init;
pub mod metrics;
pub mod model;
pub mod simulate;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{CoreError, Result};
pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::Tensor;

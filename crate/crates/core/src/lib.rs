//! Single-lead ECG rhythm classification toolkit.
//!
//! The crate covers the full path from raw challenge records to live
//! predictions:
//!
//! - [`record_io`]: Level-4 MAT parsing, label manifests, stratified splits
//! - [`dsp`]: zero-phase Butterworth band-pass, polyphase resampling, scaling
//! - [`pipeline`]: sliding windows, augmentation, duration-sorted batching
//! - [`nn`]: the 7-block convolutional + LSTM + softmax network with
//!   hand-rolled reverse-mode gradients and a binary checkpoint format
//! - [`train`]: cross-entropy, Adam, plateau learning-rate schedule,
//!   best-epoch checkpointing
//! - [`eval`]: confusion matrix, per-class sensitivity/specificity/F1,
//!   challenge score
//! - [`stream`]: telemetry ingestion and grouped streaming inference over a
//!   framed publish/subscribe protocol
//!
//! Signals are classified into four rhythm classes: normal rhythm, atrial
//! fibrillation, other rhythm, and noise.

pub mod dsp;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod record_io;
pub mod stream;
pub mod train;

#[cfg(feature = "testutil")]
pub mod testutil;

pub use record_io::{EcgRecord, RhythmClass};

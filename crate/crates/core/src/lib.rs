//! Occupancy detection from hourly smart-meter data.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors and a tape-based reverse-mode autodiff
//!   engine, plus finite-difference gradient checking.
//! - [`layers`]: neural building blocks (linear, LSTM cell, Bi-LSTM,
//!   sinusoidal positional encoding, multi-head self-attention, encoder
//!   block, temporal attention).
//! - [`models`]: the four detector architectures, assembly, forward
//!   inference and checkpoint serialization.
//! - [`data`]: raw meter-data ingestion, hourly resampling, normalization,
//!   windowed feature extraction and synthetic dataset generation.
//! - [`training`]: binary cross-entropy loss, Adam-style optimizer and the
//!   training loop.
//! - [`evaluation`]: classification metrics, k-fold cross-validation and
//!   report emission.
//! - [`gradcheck`]: the end-to-end gradient-check suite used by the CLI.

pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod training;

pub use tensor::{NodeId, Tape, Tensor, TensorError};

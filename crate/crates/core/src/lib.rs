//! Training and evaluation toolkit for attention-based speech synthesis with
//! a combined frame and style reconstruction objective.
//!
//! - [`numerics`]: tensors, reverse-mode autodiff, layers, Adam, checkpoints
//! - [`dsp`]: WAV I/O, STFT, log-mel features, deltas, F0, Griffin-Lim
//! - [`ser`]: emotion classifier whose hidden activations serve as style features
//! - [`tts`]: Tacotron-style encoder/decoder with location-sensitive attention
//! - [`loss`]: frame, style and total objectives
//! - [`eval`]: DTW, MCD, F0 RMSE, frame disturbance, cluster separation
//! - [`pipeline`]: configs, synthetic corpora, trainers and the CLI commands

pub mod dsp;
pub mod error;
pub mod eval;
pub mod loss;
pub mod numerics;
pub mod pipeline;
pub mod ser;
pub mod tts;

pub use error::{Error, Result};
pub use numerics::{ParamSet, Tape, Tensor, Var};

//! Attention-based character-to-mel acoustic model.

mod config;
mod model;
mod text;

pub use config::{TrainingMode, TtsConfig};
pub use model::{
    AttentionMemory, HaltReason, StyleConditioner, SynthesisResult, TtsModel, TtsNetwork,
    TtsOutputs,
};
pub use text::{encode_text, normalize_text, text_to_ids, CHARSET, DIGIT_WORDS};

//! Speech emotion recognizer used as a frozen style descriptor.
//!
//! A convolution stack over (static, Δ, ΔΔ) log-mel segments feeds a
//! projection (low-level style features), a bidirectional LSTM with a
//! projection (middle level) and an attention re-weighting (high level).
//! The high-level rows are pooled and classified into four emotions.

mod config;
mod model;
mod segment;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use config::SerConfig;
pub use model::{extract_style, style_input, SerModel, SerNetwork, SerOutputs};
pub use segment::{segment_count, segment_utterance};
pub use train::{train_ser, SerExample, SerTrainConfig, SerTrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Happy,
    Angry,
    Sad,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [
        Emotion::Happy,
        Emotion::Angry,
        Emotion::Sad,
        Emotion::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Happy => "happy",
            Emotion::Angry => "angry",
            Emotion::Sad => "sad",
            Emotion::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidLabel(s.to_string()))
    }
}

/// Tap point inside the descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StyleLevel {
    /// After the convolution stack and projection.
    #[serde(rename = "L")]
    Low,
    /// After the BLSTM and projection.
    #[serde(rename = "M")]
    Middle,
    /// After attention re-weighting.
    #[serde(rename = "H")]
    High,
    /// All three, combined with equal weights where a scalar is needed.
    #[serde(rename = "LMH")]
    All,
}

impl StyleLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleLevel::Low => "L",
            StyleLevel::Middle => "M",
            StyleLevel::High => "H",
            StyleLevel::All => "LMH",
        }
    }

    /// The single levels this selection covers.
    pub fn components(self) -> &'static [StyleLevel] {
        match self {
            StyleLevel::Low => &[StyleLevel::Low],
            StyleLevel::Middle => &[StyleLevel::Middle],
            StyleLevel::High => &[StyleLevel::High],
            StyleLevel::All => &[StyleLevel::Low, StyleLevel::Middle, StyleLevel::High],
        }
    }
}

impl fmt::Display for StyleLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l" | "low" => Ok(StyleLevel::Low),
            "m" | "middle" => Ok(StyleLevel::Middle),
            "h" | "high" => Ok(StyleLevel::High),
            "lmh" | "all" => Ok(StyleLevel::All),
            _ => Err(Error::invalid(format!(
                "invalid style level {s:?} (expected L, M, H or LMH)"
            ))),
        }
    }
}

/// Fixed-size style matrix (`S × D`) from one utterance at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeatures {
    pub level: StyleLevel,
    pub matrix: Tensor,
    pub source_id: String,
}

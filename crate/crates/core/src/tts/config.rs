use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ser::StyleLevel;

/// How style enters training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Frame loss only.
    Baseline,
    /// Frame loss plus style reconstruction loss through a frozen recognizer.
    Pl,
    /// Frame loss with encoder states conditioned on reference style features.
    St,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [TrainingMode::Baseline, TrainingMode::Pl, TrainingMode::St];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Baseline => "baseline",
            TrainingMode::Pl => "pl",
            TrainingMode::St => "st",
        }
    }

    pub fn needs_recognizer(self) -> bool {
        self != TrainingMode::Baseline
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(TrainingMode::Baseline),
            "pl" => Ok(TrainingMode::Pl),
            "st" => Ok(TrainingMode::St),
            _ => Err(Error::invalid(format!(
                "unknown mode {s:?} (expected baseline, pl or st)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtsConfig {
    pub charset: String,
    pub embedding_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_conv_channels: usize,
    pub encoder_conv_width: usize,
    /// Cells per encoder LSTM direction.
    pub encoder_lstm_hidden: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_width: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    /// Keep pre-net dropout on when synthesizing.
    pub prenet_dropout_at_inference: bool,
    pub decoder_lstm_dim: usize,
    pub decoder_layers: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_width: usize,
    pub mel_channels: usize,
    /// Frames emitted per decoder step.
    pub reduction: usize,
    pub max_decoder_steps: usize,
    pub stop_threshold: f64,
    pub mode: TrainingMode,
    pub style_level: StyleLevel,
    /// Width of the projected style vector appended to encoder states.
    pub style_projection_dim: usize,
}

impl TtsConfig {
    pub fn full() -> Self {
        TtsConfig {
            charset: super::CHARSET.to_string(),
            embedding_dim: 256,
            encoder_conv_layers: 3,
            encoder_conv_channels: 256,
            encoder_conv_width: 5,
            encoder_lstm_hidden: 128,
            attention_dim: 128,
            location_filters: 32,
            location_width: 31,
            prenet_dim: 256,
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: false,
            decoder_lstm_dim: 1024,
            decoder_layers: 2,
            postnet_layers: 5,
            postnet_channels: 512,
            postnet_width: 5,
            mel_channels: 40,
            reduction: 1,
            max_decoder_steps: 1000,
            stop_threshold: 0.5,
            mode: TrainingMode::Baseline,
            style_level: StyleLevel::Low,
            style_projection_dim: 128,
        }
    }

    pub fn desk() -> Self {
        TtsConfig {
            embedding_dim: 32,
            encoder_conv_channels: 32,
            encoder_lstm_hidden: 16,
            attention_dim: 32,
            location_filters: 8,
            location_width: 7,
            prenet_dim: 32,
            decoder_lstm_dim: 64,
            postnet_channels: 32,
            max_decoder_steps: 200,
            style_projection_dim: 16,
            ..Self::full()
        }
    }

    pub fn with_mode(mut self, mode: TrainingMode, level: StyleLevel) -> Self {
        self.mode = mode;
        self.style_level = level;
        self
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.encoder_lstm_hidden
    }

    /// Width of the memory attended over (encoder states plus style).
    pub fn memory_dim(&self) -> usize {
        match self.mode {
            TrainingMode::St => self.encoder_dim() + self.style_projection_dim,
            _ => self.encoder_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("tts config: {msg}")))
            }
        };
        check(self.reduction == 1, "reduction factor must be 1")?;
        check(
            self.decoder_layers == 2,
            "decoder has exactly 2 LSTM layers",
        )?;
        check(self.postnet_layers >= 2, "post-net needs at least 2 layers")?;
        check(self.encoder_conv_layers >= 1, "encoder needs a convolution")?;
        for w in [
            self.encoder_conv_width,
            self.location_width,
            self.postnet_width,
        ] {
            check(w % 2 == 1, "convolution widths must be odd")?;
        }
        check(
            (0.0..1.0).contains(&self.prenet_dropout),
            "dropout in [0, 1)",
        )?;
        check(
            self.max_decoder_steps >= 1,
            "max_decoder_steps must be positive",
        )?;
        check(!self.charset.is_empty(), "empty charset")?;
        check(
            self.mel_channels == crate::dsp::MelConfig::default().n_mels,
            "mel channels must match the feature extractor",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        TtsConfig::full().validate().unwrap();
        TtsConfig::desk().validate().unwrap();
        let mut bad = TtsConfig::desk();
        bad.reduction = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn memory_width_grows_in_style_mode() {
        let c = TtsConfig::desk();
        assert_eq!(c.memory_dim(), 32);
        let st = c.with_mode(TrainingMode::St, StyleLevel::Low);
        assert_eq!(st.memory_dim(), 48);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("PL".parse::<TrainingMode>().unwrap(), TrainingMode::Pl);
        assert!("gst".parse::<TrainingMode>().is_err());
    }
}

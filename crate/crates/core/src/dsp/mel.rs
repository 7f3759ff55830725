//! Log-mel spectrograms with an HTK-scale triangular filterbank.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::normalize::NormStats;
use super::stft::{StftConfig, StftEngine};
use super::Waveform;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Added before the logarithm.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            stft: StftConfig::default(),
            n_mels: 40,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

type FilterbankKey = (usize, usize, u32, u64, u64);

fn cache() -> &'static Mutex<HashMap<FilterbankKey, Arc<Tensor>>> {
    static CACHE: OnceLock<Mutex<HashMap<FilterbankKey, Arc<Tensor>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// `n_mels × (n_fft/2+1)` matrix of unit-peak triangles whose edges are
/// equally spaced on the mel scale between `f_min` and `f_max`. Built once
/// per configuration and shared.
pub fn mel_filterbank(config: &MelConfig) -> Arc<Tensor> {
    let key = (
        config.n_mels,
        config.stft.n_fft,
        config.stft.sample_rate,
        config.f_min.to_bits(),
        config.f_max.to_bits(),
    );
    let mut guard = cache().lock().expect("filterbank cache poisoned");
    guard
        .entry(key)
        .or_insert_with(|| Arc::new(build_filterbank(config)))
        .clone()
}

fn build_filterbank(config: &MelConfig) -> Tensor {
    let bins = config.stft.bins();
    let n = config.n_mels;
    let (lo, hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
    let edges: Vec<f64> = (0..n + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n + 1) as f64))
        .collect();
    let bin_hz = config.stft.sample_rate as f64 / config.stft.n_fft as f64;
    let mut data = vec![0.0; n * bins];
    for m in 0..n {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            data[m * bins + k] = w;
        }
    }
    Tensor::new(vec![n, bins], data).expect("filterbank extents are positive")
}

/// `T×N` log-mel energies plus the framing they were computed with.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub config: MelConfig,
    /// Statistics applied to `frames`, if normalized.
    pub normalization: Option<NormStats>,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor, config: MelConfig) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[1] != config.n_mels {
            return Err(Error::InvalidShape {
                op: "mel_spectrogram",
                msg: format!(
                    "expected T×{} frames, got {:?}",
                    config.n_mels,
                    frames.shape()
                ),
            });
        }
        Ok(MelSpectrogram {
            frames,
            config,
            normalization: None,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.config.stft.frame_shift_ms()
    }

    pub fn frame_size_ms(&self) -> f64 {
        self.config.stft.frame_size_ms()
    }
}

/// Mel energies of magnitude spectra: `filterbank · |X_t|` per frame.
pub fn mel_energies(magnitudes: &[f64], frames: usize, config: &MelConfig) -> Vec<f64> {
    let fb = mel_filterbank(config);
    let bins = config.stft.bins();
    let n = config.n_mels;
    let mut out = vec![0.0; frames * n];
    for t in 0..frames {
        let mag = &magnitudes[t * bins..(t + 1) * bins];
        for m in 0..n {
            out[t * n + m] = fb.row(m).iter().zip(mag).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `log(filterbank · |STFT| + ε)` per frame.
pub fn mel_spectrogram(wave: &Waveform, config: &MelConfig) -> Result<MelSpectrogram> {
    if wave.sample_rate != config.stft.sample_rate {
        return Err(Error::invalid(format!(
            "mel_spectrogram: sample rate {} does not match configured {}",
            wave.sample_rate, config.stft.sample_rate
        )));
    }
    let spec = StftEngine::new(config.stft)?.stft(&wave.samples)?;
    let energies = mel_energies(&spec.magnitudes(), spec.frames, config);
    let logged = energies
        .into_iter()
        .map(|e| (e + config.log_floor).ln())
        .collect();
    MelSpectrogram::new(
        Tensor::new(vec![spec.frames, config.n_mels], logged)?,
        *config,
    )
}

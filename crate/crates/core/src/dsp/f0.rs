//! Frame-wise F0 from the normalized autocorrelation.

use serde::{Deserialize, Serialize};

use super::stft::{frame_count, StftConfig};
use super::Waveform;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Config {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum normalized autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
    /// A later peak is preferred over the first one only when the first is
    /// below this fraction of the best; guards against octave errors.
    pub octave_ratio: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        F0Config {
            f0_min: 50.0,
            f0_max: 400.0,
            voicing_threshold: 0.3,
            octave_ratio: 0.9,
        }
    }
}

fn normalized_autocorrelation(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (frame[i], frame[i + lag]);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    let denom = (xx * yy).sqrt();
    if denom <= 1e-12 {
        0.0
    } else {
        xy / denom
    }
}

/// F0 in Hz for one analysis frame, or 0.0 when unvoiced.
pub fn frame_f0(frame: &[f64], sample_rate: u32, config: &F0Config) -> f64 {
    let sr = sample_rate as f64;
    let min_lag = (sr / config.f0_max).floor().max(1.0) as usize;
    let max_lag = ((sr / config.f0_min).ceil() as usize).min(frame.len().saturating_sub(2));
    if max_lag <= min_lag + 1 || frame.iter().map(|x| x * x).sum::<f64>() < 1e-10 {
        return 0.0;
    }
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1)
        .map(|lag| normalized_autocorrelation(frame, lag))
        .collect();
    // r[i] holds lag min_lag − 1 + i; peaks are searched on interior lags.
    let peaks: Vec<usize> = (1..r.len() - 1)
        .filter(|&i| r[i] > r[i - 1] && r[i] >= r[i + 1])
        .collect();
    let Some(best) = peaks.iter().map(|&i| r[i]).reduce(f64::max) else {
        return 0.0;
    };
    if best < config.voicing_threshold {
        return 0.0;
    }
    let i = *peaks
        .iter()
        .find(|&&i| r[i] >= config.octave_ratio * best)
        .expect("the best peak qualifies");
    let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
    let curvature = a - 2.0 * b + c;
    let offset = if curvature.abs() > 1e-12 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = (min_lag - 1 + i) as f64 + offset;
    (sr / lag).clamp(config.f0_min, config.f0_max)
}

/// Per-frame F0 on the same grid as the mel spectrogram; 0.0 is unvoiced.
pub fn estimate_f0(wave: &Waveform, stft: &StftConfig, config: &F0Config) -> Result<Vec<f64>> {
    let frames = frame_count(wave.samples.len(), stft.win, stft.hop)?;
    Ok((0..frames)
        .map(|t| {
            let start = t * stft.hop;
            frame_f0(
                &wave.samples[start..start + stft.win],
                wave.sample_rate,
                config,
            )
        })
        .collect())
}

/// Median of the voiced values, if any.
pub fn voiced_median(contour: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = contour.iter().copied().filter(|&f| f > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

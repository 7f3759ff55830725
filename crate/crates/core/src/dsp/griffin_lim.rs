//! Griffin-Lim phase reconstruction and mel-to-linear inversion.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{mel_filterbank, MelConfig};
use super::stft::{Spectrogram, StftConfig, StftEngine};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    /// `(T − 1)·hop + win` samples.
    pub samples: Vec<f64>,
    /// Spectral convergence `‖|STFT(x_i)| − S‖ / ‖S‖` after each iteration.
    pub convergence: Vec<f64>,
}

fn spectral_convergence(target: &[f64], spec: &Spectrogram) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (s, c) in target.iter().zip(&spec.data) {
        num += (c.norm() - s).powi(2);
        den += s * s;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Momentum of the accelerated update.
pub const MOMENTUM: f64 = 0.99;

fn replace_magnitude(spec: &Spectrogram, target: &[f64]) -> Spectrogram {
    let data = spec
        .data
        .iter()
        .zip(target)
        .map(|(c, &m)| {
            let norm = c.norm();
            if norm > 1e-12 {
                c * (m / norm)
            } else {
                Complex::new(m, 0.0)
            }
        })
        .collect();
    Spectrogram {
        frames: spec.frames,
        bins: spec.bins,
        data,
    }
}

/// Reconstructs a waveform whose STFT magnitude approximates `magnitude`
/// (`T × (n_fft/2+1)`), starting from phases drawn from `seed`.
///
/// Each round replaces the magnitude and projects back onto consistent
/// spectrograms (ISTFT then STFT). Rounds use a momentum step; when that
/// step would raise the spectral convergence, the round falls back to the
/// plain projection from the previous iterate, which never increases it.
pub fn griffin_lim(
    magnitude: &Tensor,
    config: &StftConfig,
    n_iter: usize,
    seed: u64,
) -> Result<GriffinLimOutput> {
    if n_iter < 1 {
        return Err(Error::invalid("griffin_lim: n_iter must be at least 1"));
    }
    let bins = config.bins();
    if magnitude.rank() != 2 || magnitude.shape()[1] != bins {
        return Err(Error::InvalidShape {
            op: "griffin_lim",
            msg: format!("expected T×{bins} magnitudes, got {:?}", magnitude.shape()),
        });
    }
    let frames = magnitude.shape()[0];
    let target = magnitude.data();
    let engine = StftEngine::new(*config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Spectrogram {
        frames,
        bins,
        data: target
            .iter()
            .map(|&m| Complex::from_polar(m, rng.random_range(0.0..std::f64::consts::TAU)))
            .collect(),
    };
    // `current` is the latest consistent iterate, `search` the extrapolated
    // point the next round starts from.
    let mut current = engine.stft(&engine.istft(&init))?;
    let mut current_error = spectral_convergence(target, &current);
    let mut search = current.clone();
    let mut convergence = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let mut next = engine.stft(&engine.istft(&replace_magnitude(&search, target)))?;
        let mut next_error = spectral_convergence(target, &next);
        if next_error > current_error {
            next = engine.stft(&engine.istft(&replace_magnitude(&current, target)))?;
            next_error = spectral_convergence(target, &next);
            search = next.clone();
        } else {
            search = Spectrogram {
                frames,
                bins,
                data: next
                    .data
                    .iter()
                    .zip(&current.data)
                    .map(|(n, c)| n + (n - c) * MOMENTUM)
                    .collect(),
            };
        }
        current = next;
        current_error = next_error;
        convergence.push(current_error);
    }
    Ok(GriffinLimOutput {
        samples: engine.istft(&current),
        convergence,
    })
}

type PinvKey = (usize, usize, u32, u64, u64);

fn pinv_cache() -> &'static Mutex<HashMap<PinvKey, Arc<DMatrix<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<PinvKey, Arc<DMatrix<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn filterbank_pinv(config: &MelConfig) -> Result<Arc<DMatrix<f64>>> {
    let key = (
        config.n_mels,
        config.stft.n_fft,
        config.stft.sample_rate,
        config.f_min.to_bits(),
        config.f_max.to_bits(),
    );
    let mut guard = pinv_cache().lock().expect("pseudo-inverse cache poisoned");
    if let Some(p) = guard.get(&key) {
        return Ok(p.clone());
    }
    let fb = mel_filterbank(config);
    let m = DMatrix::from_row_slice(fb.shape()[0], fb.shape()[1], fb.data());
    let p = Arc::new(
        m.pseudo_inverse(1e-10)
            .map_err(|e| Error::invalid(format!("mel pseudo-inverse: {e}")))?,
    );
    guard.insert(key, p.clone());
    Ok(p)
}

/// Maps `T×N` log-mel frames back to `T × bins` linear magnitudes with the
/// filterbank pseudo-inverse, clamping negative magnitudes to zero.
pub fn mel_to_linear(log_mel: &Tensor, config: &MelConfig) -> Result<Tensor> {
    if log_mel.rank() != 2 || log_mel.shape()[1] != config.n_mels {
        return Err(Error::InvalidShape {
            op: "mel_to_linear",
            msg: format!(
                "expected T×{} frames, got {:?}",
                config.n_mels,
                log_mel.shape()
            ),
        });
    }
    let pinv = filterbank_pinv(config)?;
    let frames = log_mel.shape()[0];
    let bins = config.stft.bins();
    let mut out = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let energies: Vec<f64> = log_mel
            .row(t)
            .iter()
            .map(|v| (v.exp() - config.log_floor).max(0.0))
            .collect();
        for k in 0..bins {
            let v: f64 = (0..config.n_mels).map(|m| pinv[(k, m)] * energies[m]).sum();
            out.push(v.max(0.0));
        }
    }
    Tensor::new(vec![frames, bins], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel::mel_spectrogram;
    use crate::dsp::stft::stft;
    use crate::dsp::Waveform;

    fn sine_magnitude(freq: f64, frames: usize) -> (Tensor, StftConfig) {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..cfg.span(frames))
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0).sin())
            .collect();
        let s = stft(&x, cfg).unwrap();
        (
            Tensor::new(vec![s.frames, s.bins], s.magnitudes()).unwrap(),
            cfg,
        )
    }

    #[test]
    fn sine_reconstruction_converges() {
        let (mag, cfg) = sine_magnitude(440.0, 20);
        for seed in 0..8 {
            let out = griffin_lim(&mag, &cfg, 60, seed).unwrap();
            assert_eq!(out.samples.len(), cfg.span(20));
            assert_eq!(out.convergence.len(), 60);
            let last = *out.convergence.last().unwrap();
            assert!(last < 0.1, "seed {seed}: spectral convergence {last}");
            // the reported value is that of the returned waveform
            let s = stft(&out.samples, cfg).unwrap();
            assert!((spectral_convergence(mag.data(), &s) - last).abs() < 1e-9);
        }
    }

    #[test]
    fn convergence_is_non_increasing() {
        let (mag, cfg) = sine_magnitude(317.0, 12);
        let out = griffin_lim(&mag, &cfg, 40, 3).unwrap();
        for w in out.convergence.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let cfg = StftConfig::default();
        let out = griffin_lim(&Tensor::zeros(&[5, cfg.bins()]), &cfg, 3, 1).unwrap();
        assert!(out.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_zero_iterations() {
        let cfg = StftConfig::default();
        assert!(griffin_lim(&Tensor::zeros(&[2, cfg.bins()]), &cfg, 0, 1).is_err());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (mag, cfg) = sine_magnitude(250.0, 6);
        let a = griffin_lim(&mag, &cfg, 5, 9).unwrap();
        let b = griffin_lim(&mag, &cfg, 5, 9).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn pseudo_inverse_is_a_right_inverse() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg);
        let pinv = filterbank_pinv(&cfg).unwrap();
        let (n, bins) = (fb.shape()[0], fb.shape()[1]);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..bins).map(|k| fb.at2(i, k) * pinv[(k, j)]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-9, "({i},{j}) {v}");
            }
        }
    }

    #[test]
    fn mel_inversion_is_non_negative_and_shaped() {
        let cfg = MelConfig::default();
        let x: Vec<f64> = (0..cfg.stft.span(4))
            .map(|n| 0.4 * (2.0 * std::f64::consts::PI * 300.0 * n as f64 / 16000.0).sin())
            .collect();
        let mel = mel_spectrogram(&Waveform::new(x, 16000), &cfg).unwrap();
        let lin = mel_to_linear(&mel.frames, &cfg).unwrap();
        assert_eq!(lin.shape(), &[4, 513]);
        assert!(lin.data().iter().all(|&v| v >= 0.0));
        assert!(lin.data().iter().any(|&v| v > 0.0));
        assert!(mel_to_linear(&Tensor::zeros(&[2, 39]), &cfg).is_err());
    }
}

//! Short-time Fourier transform with a periodic Hann window.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    /// Analysis window length in samples.
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Default for StftConfig {
    /// 50 ms windows with a 12.5 ms shift at 16 kHz.
    fn default() -> Self {
        StftConfig {
            sample_rate: 16_000,
            win: 800,
            hop: 200,
            n_fft: 1024,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_shift_ms(&self) -> f64 {
        1000.0 * self.hop as f64 / self.sample_rate as f64
    }

    pub fn frame_size_ms(&self) -> f64 {
        1000.0 * self.win as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.win == 0 || self.hop == 0 || self.sample_rate == 0 {
            return Err(Error::invalid(
                "stft: win, hop and sample rate must be positive",
            ));
        }
        if self.n_fft < self.win {
            return Err(Error::invalid(format!(
                "stft: n_fft {} is shorter than the window {}",
                self.n_fft, self.win
            )));
        }
        Ok(())
    }

    /// Number of samples spanned by `frames` analysis frames.
    pub fn span(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.win
    }
}

/// Frames obtainable without padding: `1 + ⌊(len − win)/hop⌋`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Result<usize> {
    if len < win {
        return Err(Error::invalid(format!(
            "stft: waveform of {len} samples is shorter than one {win}-sample window"
        )));
    }
    Ok(1 + (len - win) / hop)
}

/// Periodic Hann window, `0.5 − 0.5·cos(2πn/len)`.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// One-sided spectra, `frames × bins` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Reusable forward/inverse FFT plans for one configuration.
pub struct StftEngine {
    pub config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftEngine {
            config,
            window: hann(config.win),
            forward: planner.plan_fft_forward(config.n_fft),
            inverse: planner.plan_fft_inverse(config.n_fft),
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn stft(&self, samples: &[f64]) -> Result<Spectrogram> {
        let c = self.config;
        let frames = frame_count(samples.len(), c.win, c.hop)?;
        let bins = c.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        for t in 0..frames {
            let start = t * c.hop;
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for (i, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                b.re = samples[start + i] * w;
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, data })
    }

    /// Least-squares inverse: overlap-adds `w·ifft(X_t)` and divides by
    /// `Σ w²`, which minimizes the distance between the STFT of the result
    /// and `spec`. Samples with zero window coverage are set to zero.
    pub fn istft(&self, spec: &Spectrogram) -> Vec<f64> {
        let c = self.config;
        let len = c.span(spec.frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        let scale = 1.0 / c.n_fft as f64;
        for t in 0..spec.frames {
            let half = spec.frame(t);
            buf[..spec.bins].copy_from_slice(half);
            for k in spec.bins..c.n_fft {
                buf[k] = half[c.n_fft - k].conj();
            }
            // Hermitian symmetry forces the edge bins to be real.
            buf[0].im = 0.0;
            if c.n_fft.is_multiple_of(2) {
                buf[c.n_fft / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = t * c.hop;
            for (i, w) in self.window.iter().enumerate() {
                out[start + i] += w * buf[i].re * scale;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 1e-12 { *o / n } else { 0.0 };
        }
        out
    }
}

/// Convenience wrapper building a one-off [`StftEngine`].
pub fn stft(samples: &[f64], config: StftConfig) -> Result<Spectrogram> {
    StftEngine::new(config)?.stft(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0).sin())
            .collect()
    }

    #[test]
    fn zero_signal_has_zero_spectrum() {
        let s = stft(&vec![0.0; 2000], StftConfig::default()).unwrap();
        assert!(s.magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sine_peaks_at_nearest_bin() {
        let s = stft(&sine(1000.0, 4000), StftConfig::default()).unwrap();
        let expected = (1000.0f64 / (16000.0 / 1024.0)).round() as usize;
        assert_eq!(expected, 64);
        for t in 0..s.frames {
            let mags: Vec<f64> = s.frame(t).iter().map(|c| c.norm()).collect();
            let peak = (0..s.bins)
                .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
                .unwrap();
            assert_eq!(peak, expected);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..1600).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = StftConfig::default();
        let s = stft(&x, cfg).unwrap();
        let w = hann(cfg.win);
        for t in 0..s.frames {
            let frame_energy: f64 = (0..cfg.win)
                .map(|i| (x[t * cfg.hop + i] * w[i]).powi(2))
                .sum();
            let f = s.frame(t);
            let n = cfg.n_fft;
            let mut spec_energy = f[0].norm_sqr() + f[n / 2].norm_sqr();
            spec_energy += 2.0 * f[1..n / 2].iter().map(|c| c.norm_sqr()).sum::<f64>();
            let rel = (frame_energy - spec_energy / n as f64).abs() / frame_energy;
            assert!(rel < 1e-6, "{rel}");
        }
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(800, 800, 200).unwrap(), 1);
        assert_eq!(frame_count(16000, 800, 200).unwrap(), 77);
        assert_eq!(frame_count(999, 800, 200).unwrap(), 1);
        assert_eq!(frame_count(1000, 800, 200).unwrap(), 2);
        assert!(frame_count(799, 800, 200).is_err());
        for len in 800..3000 {
            let s = stft(&vec![0.0; len], StftConfig::default()).unwrap();
            assert_eq!(s.frames, 1 + (len - 800) / 200);
        }
    }

    #[test]
    fn istft_inverts_stft_in_covered_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..cfg.span(10))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let eng = StftEngine::new(cfg).unwrap();
        let y = eng.istft(&eng.stft(&x).unwrap());
        assert_eq!(y.len(), x.len());
        for i in 1..x.len() {
            assert!((x[i] - y[i]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn rejects_short_fft() {
        let cfg = StftConfig {
            n_fft: 512,
            ..StftConfig::default()
        };
        assert!(stft(&vec![0.0; 2000], cfg).is_err());
    }
}

//! Per-channel mean/variance normalization of feature matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Standard deviations are floored here before dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// Corpus statistics, serialized as `{"mel_mean": [...], "mel_std": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mel_mean: Vec<f64>,
    pub mel_std: Vec<f64>,
}

impl NormStats {
    /// Pools every frame of every matrix (population variance).
    pub fn from_corpus<'a>(mats: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mats: Vec<&Tensor> = mats.into_iter().collect();
        for m in &mats {
            let n = m.cols();
            if sum.is_empty() {
                sum = vec![0.0; n];
            } else if sum.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "norm_stats",
                    lhs: vec![sum.len()],
                    rhs: m.shape().to_vec(),
                });
            }
            for r in 0..m.rows() {
                for (s, v) in sum.iter_mut().zip(m.row(r)) {
                    *s += v;
                }
            }
            count += m.rows();
        }
        if count == 0 {
            return Err(Error::invalid("norm_stats: empty corpus"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for m in &mats {
            for r in 0..m.rows() {
                for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        Ok(NormStats {
            mel_std: var.iter().map(|v| (v / count as f64).sqrt()).collect(),
            mel_mean: mean,
        })
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mel_mean: vec![0.0; channels],
            mel_std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mel_mean.len()
    }

    /// Floored standard deviations actually used for scaling.
    pub fn scales(&self) -> Vec<f64> {
        self.mel_std.iter().map(|s| s.max(STD_FLOOR)).collect()
    }

    fn check(&self, m: &Tensor) -> Result<()> {
        if m.cols() != self.channels() || self.mel_std.len() != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: vec![self.channels()],
                rhs: m.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `(x − μ)/σ` per channel.
    pub fn normalize(&self, m: &Tensor) -> Result<Tensor> {
        self.check(m)?;
        let scales = self.scales();
        let n = self.channels();
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mel_mean[i % n]) / scales[i % n])
            .collect();
        Tensor::new(m.shape().to_vec(), data)
    }

    /// `x·σ + μ` per channel.
    pub fn denormalize(&self, m: &Tensor) -> Result<Tensor> {
        self.check(m)?;
        let scales = self.scales();
        let n = self.channels();
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scales[i % n] + self.mel_mean[i % n])
            .collect();
        Tensor::new(m.shape().to_vec(), data)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: NormStats = serde_json::from_str(&text)?;
        if stats.mel_mean.len() != stats.mel_std.len() {
            return Err(Error::invalid(format!(
                "{}: mel_mean has {} entries but mel_std has {}",
                path.display(),
                stats.mel_mean.len(),
                stats.mel_std.len()
            )));
        }
        Ok(stats)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerConfig {
    /// Frames per segment (3 s at a 12.5 ms shift).
    pub segment_frames: usize,
    /// Segments kept per utterance; later ones are dropped.
    pub max_segments: usize,
    pub n_mels: usize,
    /// Feature maps of each convolution layer; a 2×2 max-pool follows each.
    pub conv_channels: Vec<usize>,
    /// Kernel extent as (time, frequency).
    pub kernel: (usize, usize),
    /// Time stride of every convolution.
    pub conv_time_stride: usize,
    /// Width of each style feature row.
    pub projection_dim: usize,
    /// Rows of each style feature matrix.
    pub style_steps: usize,
    /// Cells per LSTM direction.
    pub lstm_hidden: usize,
    pub attention_dim: usize,
    pub fc_units: usize,
    pub classes: usize,
}

impl SerConfig {
    pub fn full() -> Self {
        SerConfig {
            segment_frames: 240,
            max_segments: 8,
            n_mels: 40,
            conv_channels: vec![128, 256],
            kernel: (5, 3),
            conv_time_stride: 1,
            projection_dim: 200,
            style_steps: 150,
            lstm_hidden: 128,
            attention_dim: 200,
            fc_units: 64,
            classes: 4,
        }
    }

    pub fn desk() -> Self {
        SerConfig {
            conv_channels: vec![8, 16],
            conv_time_stride: 2,
            projection_dim: 16,
            style_steps: 12,
            lstm_hidden: 16,
            attention_dim: 16,
            ..Self::full()
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    fn layer_extent(&self, len: usize, kernel: usize, pad: usize, stride: usize) -> usize {
        (len + 2 * pad - kernel) / stride + 1
    }

    /// `(time slices, frequency bins)` left after the convolution stack.
    pub fn conv_output_extent(&self) -> (usize, usize) {
        let (pt, pf) = self.padding();
        let (mut t, mut f) = (self.segment_frames, self.n_mels);
        for _ in &self.conv_channels {
            t = self.layer_extent(t, self.kernel.0, pt, self.conv_time_stride);
            f = self.layer_extent(f, self.kernel.1, pf, 1);
            t = t.div_ceil(2);
            f = f.div_ceil(2);
        }
        (t, f)
    }

    /// Width of one flattened time slice entering the projection.
    pub fn slice_width(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(3) * self.conv_output_extent().1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.segment_frames,
            self.max_segments,
            self.n_mels,
            self.kernel.0,
            self.kernel.1,
            self.conv_time_stride,
            self.projection_dim,
            self.style_steps,
            self.lstm_hidden,
            self.attention_dim,
            self.fc_units,
            self.classes,
        ];
        if positive.contains(&0) || self.conv_channels.is_empty() || self.conv_channels.contains(&0)
        {
            return Err(Error::invalid("ser config: all extents must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_extents() {
        let c = SerConfig::desk();
        assert_eq!(c.conv_output_extent(), (15, 10));
        assert_eq!(c.slice_width(), 160);
    }

    #[test]
    fn full_extents() {
        let c = SerConfig::full();
        assert_eq!(c.conv_output_extent(), (60, 10));
        assert_eq!(c.classes, 4);
        assert_eq!((c.style_steps, c.projection_dim), (150, 200));
    }
}

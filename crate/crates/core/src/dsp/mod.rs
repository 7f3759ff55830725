//! Audio I/O and signal processing.

pub mod deltas;
pub mod f0;
pub mod griffin_lim;
pub mod mel;
pub mod normalize;
pub mod stft;
pub mod wav;

pub use deltas::delta_stack;
pub use f0::{estimate_f0, F0Config};
pub use griffin_lim::{griffin_lim, mel_to_linear, GriffinLimOutput};
pub use mel::{mel_filterbank, mel_spectrogram, MelConfig, MelSpectrogram};
pub use normalize::NormStats;
pub use stft::{frame_count, stft, StftConfig};
pub use wav::{load_wav, save_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

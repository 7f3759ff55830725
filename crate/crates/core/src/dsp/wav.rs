use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono RIFF/WAVE file, scaling samples by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedWav(format!(
            "unsupported channel count {}",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedWav(
            "unsupported sample format float".into(),
        ));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedWav(format!(
            "unsupported bits per sample {}",
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Quantizes to 16-bit PCM mono; values outside `[-1, 1)` saturate.
pub fn save_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &wave.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn quantize(x: f64) -> i16 {
    (x * FULL_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

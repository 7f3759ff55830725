use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::write_json;
use crate::dsp::{
    griffin_lim, load_wav, mel_spectrogram, mel_to_linear, save_wav, MelConfig, Waveform,
};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, TensorArchive};
use crate::tts::{encode_text, normalize_text, HaltReason, SynthesisResult, TtsModel};

/// Waveform and decoder outputs of one synthesized sentence.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub normalized_text: String,
    pub wave: Waveform,
    pub decoded: SynthesisResult,
    /// Final Griffin-Lim spectral convergence.
    pub convergence: f64,
}

/// `T` frames span `T·hop` samples: the centred part of the
/// `(T−1)·hop + win` samples Griffin-Lim returns.
pub fn trim_to_frames(samples: &[f64], frames: usize, mel: &MelConfig) -> Vec<f64> {
    let hop = mel.stft.hop;
    let offset = (mel.stft.win - hop) / 2;
    let mut out: Vec<f64> = samples
        .iter()
        .skip(offset)
        .take(frames * hop)
        .copied()
        .collect();
    out.resize(frames * hop, 0.0);
    out
}

/// Normalized log-mel of a reference recording in the model's domain.
pub fn reference_features(model: &TtsModel, path: &Path, mel: &MelConfig) -> Result<Tensor> {
    let frames = mel_spectrogram(&load_wav(path)?, mel)?.frames;
    model.stats.normalize(&frames)
}

/// Text → normalized mel → raw log-mel → linear magnitude → waveform.
pub fn synthesize(
    model: &TtsModel,
    text: &str,
    reference: Option<&Tensor>,
    cfg: &RunConfig,
) -> Result<Synthesis> {
    let normalized_text = normalize_text(text)?;
    let ids = encode_text(&normalized_text, &model.config().charset)?;
    let decoded = model.infer(&ids, reference, model.config().max_decoder_steps, cfg.seed)?;
    let raw = model.stats.denormalize(&decoded.mel_post)?;
    let magnitude = mel_to_linear(&raw, &cfg.mel)?;
    let gl = griffin_lim(&magnitude, &cfg.mel.stft, cfg.griffin_lim_iters, cfg.seed)?;
    let samples = trim_to_frames(&gl.samples, decoded.frames(), &cfg.mel);
    Ok(Synthesis {
        normalized_text,
        wave: Waveform::new(samples, cfg.mel.stft.sample_rate),
        convergence: gl.convergence.last().copied().unwrap_or(f64::NAN),
        decoded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub text: String,
    pub normalized_text: String,
    pub frames: usize,
    pub samples: usize,
    pub duration_seconds: f64,
    pub halt: HaltReason,
    pub griffin_lim_convergence: f64,
    pub config_hash: String,
}

/// Sibling path with the extension replaced, e.g. `x.wav` → `x.mel.ckpt`.
pub fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

/// Writes `out_wav`, a `.mel.ckpt` archive (pre/post mel, attention, stop
/// probabilities) and a `.json` summary next to it.
pub fn run_synthesize(
    cfg: &RunConfig,
    checkpoint: &Path,
    text: &str,
    out_wav: &Path,
    reference_wav: Option<&Path>,
) -> Result<SynthesisSummary> {
    let model = TtsModel::load(checkpoint)?;
    let reference = match (model.network.style.is_some(), reference_wav) {
        (true, None) => {
            return Err(Error::invalid(
                "style-conditioned model needs a reference recording (--reference)",
            ))
        }
        (true, Some(p)) => Some(reference_features(&model, p, &cfg.mel)?),
        (false, _) => None,
    };
    let out = synthesize(&model, text, reference.as_ref(), cfg)?;
    if let Some(dir) = out_wav.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_wav(&out.wave, out_wav)?;

    let hash = cfg.hash();
    let d = &out.decoded;
    let mut dump = TensorArchive::new(serde_json::json!({
        "kind": "synthesis",
        "text": text,
        "normalized_text": out.normalized_text,
        "halt": d.halt,
        "config_hash": hash,
    }));
    dump.push("mel_pre", d.mel_pre.clone());
    dump.push("mel_post", d.mel_post.clone());
    dump.push("attention", d.attention.clone());
    dump.push(
        "stop_probabilities",
        Tensor::from_vec(d.stop_probabilities.clone()),
    );
    dump.save(&sibling(out_wav, "mel.ckpt"))?;

    let summary = SynthesisSummary {
        text: text.to_string(),
        normalized_text: out.normalized_text.clone(),
        frames: d.frames(),
        samples: out.wave.samples.len(),
        duration_seconds: out.wave.duration_seconds(),
        halt: d.halt,
        griffin_lim_convergence: out.convergence,
        config_hash: hash,
    };
    write_json(&sibling(out_wav, "json"), &summary)?;
    Ok(summary)
}

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{load_wav, mel_spectrogram, save_wav, MelConfig, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ser::{Emotion, SerExample};
use crate::tts::normalize_text;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Ser,
    Tts,
    Styled6,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Ser => "ser",
            CorpusKind::Tts => "tts",
            CorpusKind::Styled6 => "styled6",
        })
    }
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ser" => Ok(CorpusKind::Ser),
            "tts" => Ok(CorpusKind::Tts),
            "styled6" => Ok(CorpusKind::Styled6),
            _ => Err(Error::invalid(format!(
                "unknown corpus kind {s:?} (expected ser, tts or styled6)"
            ))),
        }
    }
}

/// Sizes of the generated corpora.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub ser_per_class: usize,
    pub tts_utterances: usize,
    pub styled_per_group: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            ser_per_class: 15,
            tts_utterances: 25,
            styled_per_group: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub kind: CorpusKind,
    pub utterances: usize,
    pub train: usize,
    pub holdout: usize,
    pub seconds: f64,
}

/// Row of a labelled manifest (`id,wav_path,label`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledRow {
    pub id: String,
    pub wav_path: String,
    pub label: String,
}

/// Row of a pipe-delimited text manifest (`id|text|normalized_text`).
#[derive(Clone, Debug, PartialEq)]
pub struct TextRow {
    pub id: String,
    pub text: String,
    pub normalized_text: String,
}

/// Errors on an existing non-empty directory unless `force` is set, in
/// which case the directory is cleared.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::invalid(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir.join("wavs")).map_err(|e| Error::io(dir, e))
}

fn utterance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

type Formants = [(f64, f64); 2];

const VOWELS: [Formants; 5] = [
    [(730.0, 90.0), (1090.0, 110.0)],
    [(530.0, 60.0), (1840.0, 100.0)],
    [(270.0, 60.0), (2290.0, 100.0)],
    [(570.0, 70.0), (840.0, 80.0)],
    [(300.0, 60.0), (870.0, 80.0)],
];

/// Harmonic source shaped by two resonances, one sample at a time.
/// Zero-amplitude samples are silent apart from the noise floor.
fn render(
    f0: &[f64],
    amp: &[f64],
    formants: &[Formants],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(f0.len());
    for n in 0..f0.len() {
        phase = (phase + f0[n] / sr).fract();
        let mut v = 0.0;
        if amp[n] > 0.0 {
            let mut k = 1;
            while k <= 40 && k as f64 * f0[n] < 6000.0 {
                let f = k as f64 * f0[n];
                let w: f64 = formants[n]
                    .iter()
                    .map(|&(c, bw)| (-0.5 * ((f - c) / bw).powi(2)).exp())
                    .sum::<f64>()
                    + 0.03 / k as f64;
                v += w * (std::f64::consts::TAU * k as f64 * phase).sin();
                k += 1;
            }
            v *= amp[n] * 0.25;
        }
        out.push(v + noise * rng.random_range(-1.0..1.0));
    }
    out
}

/// Raised-cosine syllable envelope: `rate` syllables per second, each on
/// for `duty` of its period.
fn syllable_envelope(len: usize, rate: f64, duty: f64, level: f64) -> Vec<f64> {
    let period = DEFAULT_SAMPLE_RATE as f64 / rate;
    (0..len)
        .map(|n| {
            let pos = (n as f64 % period) / period;
            if pos < duty {
                level * (std::f64::consts::PI * pos / duty).sin().powf(0.5)
            } else {
                0.0
            }
        })
        .collect()
}

fn vowel_track(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<Formants> {
    let period = (DEFAULT_SAMPLE_RATE as f64 / rate) as usize;
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let v = *VOWELS.choose(rng).expect("non-empty");
        out.extend(std::iter::repeat_n(v, period.max(1).min(len - out.len())));
    }
    out
}

/// Prosody of one emotional archetype.
struct Archetype {
    emotion: Emotion,
    f0: f64,
    /// Relative F0 change from start to end.
    slope: f64,
    /// Relative F0 modulation depth and rate (Hz).
    wobble: (f64, f64),
    level: f64,
    rate: f64,
    duty: f64,
    seconds: f64,
}

const ARCHETYPES: [Archetype; 4] = [
    Archetype {
        emotion: Emotion::Sad,
        f0: 120.0,
        slope: -0.10,
        wobble: (0.01, 2.0),
        level: 0.25,
        rate: 2.5,
        duty: 0.9,
        seconds: 1.8,
    },
    Archetype {
        emotion: Emotion::Neutral,
        f0: 165.0,
        slope: -0.04,
        wobble: (0.02, 3.0),
        level: 0.45,
        rate: 4.0,
        duty: 0.75,
        seconds: 1.5,
    },
    Archetype {
        emotion: Emotion::Happy,
        f0: 210.0,
        slope: 0.12,
        wobble: (0.10, 4.0),
        level: 0.65,
        rate: 5.0,
        duty: 0.7,
        seconds: 1.4,
    },
    Archetype {
        emotion: Emotion::Angry,
        f0: 260.0,
        slope: -0.20,
        wobble: (0.04, 6.0),
        level: 0.9,
        rate: 6.5,
        duty: 0.6,
        seconds: 1.2,
    },
];

/// Mean F0 (Hz) of each emotion's archetype.
pub fn archetype_mean_f0(emotion: Emotion) -> f64 {
    ARCHETYPES
        .iter()
        .find(|a| a.emotion == emotion)
        .expect("all emotions covered")
        .f0
}

fn render_archetype(a: &Archetype, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let seconds = a.seconds * rng.random_range(0.9..1.1);
    let len = (seconds * sr) as usize;
    let base = a.f0 + rng.random_range(-6.0..6.0);
    let rate = a.rate * rng.random_range(0.9..1.1);
    let f0: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / len as f64;
            let wob = (std::f64::consts::TAU * a.wobble.1 * n as f64 / sr).sin();
            base * (1.0 + a.slope * (t - 0.5) + a.wobble.0 * wob)
        })
        .collect();
    let amp = syllable_envelope(len, rate, a.duty, a.level);
    let formants = vowel_track(len, rate, rng);
    Waveform::new(
        render(&f0, &amp, &formants, 0.002, rng),
        DEFAULT_SAMPLE_RATE,
    )
}

/// Group names of the styled corpus, in order.
pub const STYLE_GROUPS: [&str; 6] = [
    "short_question",
    "long_question",
    "short_answer",
    "short_statement",
    "long_statement",
    "digit_string",
];

fn render_style_group(group: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    // (seconds, base F0, contour, syllable rate, duty, level)
    let (seconds, f0, rate, duty, level) = match group {
        0 => (0.8, 150.0, 4.5, 0.75, 0.5),
        1 => (2.2, 150.0, 4.5, 0.75, 0.5),
        2 => (0.6, 175.0, 3.5, 0.85, 0.8),
        3 => (0.9, 140.0, 4.0, 0.8, 0.45),
        4 => (2.4, 140.0, 4.0, 0.8, 0.45),
        _ => (1.8, 130.0, 3.3, 0.4, 0.6),
    };
    let len = (seconds * rng.random_range(0.92..1.08) * sr) as usize;
    let base = f0 + rng.random_range(-5.0..5.0);
    let contour: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / len as f64;
            let shape = match group {
                0 | 1 => {
                    if t > 0.6 {
                        0.8 * (t - 0.6)
                    } else {
                        -0.05 * t
                    }
                }
                2 => -0.35 * t,
                3 | 4 => -0.12 * t,
                _ => 0.0,
            };
            base * (1.0 + shape)
        })
        .collect();
    let amp = syllable_envelope(len, rate * rng.random_range(0.95..1.05), duty, level);
    let formants = vowel_track(len, rate, rng);
    Waveform::new(
        render(&contour, &amp, &formants, 0.002, rng),
        DEFAULT_SAMPLE_RATE,
    )
}

const WORDS: [&str; 18] = [
    "a", "the", "cat", "dog", "sat", "ran", "red", "big", "on", "up", "go", "see", "we", "it",
    "is", "no", "yes", "hi",
];

/// Samples per character unit (three 12.5 ms frames).
const CHAR_SAMPLES: usize = 600;

fn char_formants(ch: char) -> Formants {
    let i = (ch as u8 - b'a') as usize;
    [
        (250.0 + 90.0 * (i % 7) as f64, 70.0),
        (800.0 + 330.0 * (i / 7) as f64, 110.0),
    ]
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let words = rng.random_range(2..=3);
    let mut parts: Vec<String> = (0..words)
        .map(|_| WORDS.choose(rng).expect("non-empty").to_string())
        .collect();
    if rng.random_bool(0.2) {
        let at = rng.random_range(0..=parts.len());
        parts.insert(at, rng.random_range(0..10).to_string());
    }
    let end = *[".", "?", "!"].choose(rng).expect("non-empty");
    let mut s = parts.join(" ");
    if let Some(first) = s.get(..1) {
        s = first.to_uppercase() + &s[1..];
    }
    s + end
}

/// Renders normalized text, one fixed-length unit per letter and pauses for
/// spaces and punctuation.
fn render_text(normalized: &str, rng: &mut ChaCha8Rng) -> Waveform {
    let mut units: Vec<(usize, Option<Formants>)> = vec![(2 * CHAR_SAMPLES / 3, None)];
    for ch in normalized.chars() {
        match ch {
            'a'..='z' => units.push((CHAR_SAMPLES, Some(char_formants(ch)))),
            ' ' | ',' => units.push((2 * CHAR_SAMPLES / 3, None)),
            '\'' => units.push((CHAR_SAMPLES / 3, None)),
            _ => units.push((4 * CHAR_SAMPLES / 3, None)),
        }
    }
    units.push((2 * CHAR_SAMPLES / 3, None));
    let len: usize = units.iter().map(|u| u.0).sum();
    let question = normalized.ends_with('?');
    let exclaim = normalized.ends_with('!');
    let base = if exclaim { 165.0 } else { 140.0 };
    let mut f0 = Vec::with_capacity(len);
    let mut amp = Vec::with_capacity(len);
    let mut formants = Vec::with_capacity(len);
    for (samples, form) in &units {
        for k in 0..*samples {
            let t = f0.len() as f64 / len as f64;
            let rise = if question && t > 0.6 {
                0.7 * (t - 0.6)
            } else {
                0.0
            };
            f0.push(base * (1.0 - 0.1 * t + rise));
            let edge = (k.min(samples - 1 - k) as f64 / 40.0).min(1.0);
            amp.push(if form.is_some() {
                edge * if exclaim { 0.8 } else { 0.5 }
            } else {
                0.0
            });
            formants.push(form.unwrap_or(VOWELS[0]));
        }
    }
    Waveform::new(
        render(&f0, &amp, &formants, 0.002, rng),
        DEFAULT_SAMPLE_RATE,
    )
}

fn write_labelled(path: &Path, rows: &[LabelledRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labelled(path: &Path) -> Result<Vec<LabelledRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<LabelledRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    check_unique(rows.iter().map(|r| r.id.as_str()), path)?;
    Ok(rows)
}

fn write_text_manifest(path: &Path, rows: &[TextRow]) -> Result<()> {
    let body: String = rows
        .iter()
        .map(|r| format!("{}|{}|{}\n", r.id, r.text, r.normalized_text))
        .collect();
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_text_manifest(path: &Path) -> Result<Vec<TextRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!(
                "{}:{}: expected id|text|normalized_text",
                path.display(),
                n + 1
            )));
        }
        rows.push(TextRow {
            id: parts[0].to_string(),
            text: parts[1].to_string(),
            normalized_text: parts[2].to_string(),
        });
    }
    check_unique(rows.iter().map(|r| r.id.as_str()), path)?;
    Ok(rows)
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, path: &Path) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!(
                "{}: duplicate id {id:?}",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Maps `f` over `items` on the rayon pool, or sequentially; results keep
/// input order either way.
pub fn ordered_map<T: Sync, U: Send>(
    items: &[T],
    single_thread: bool,
    f: impl Fn(&T) -> U + Sync + Send,
) -> Vec<U> {
    if single_thread {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn holdout_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1))
}

fn save_all(dir: &Path, waves: &[(String, Waveform)]) -> Result<f64> {
    let mut seconds = 0.0;
    for (id, w) in waves {
        save_wav(w, &dir.join("wavs").join(format!("{id}.wav")))?;
        seconds += w.duration_seconds();
    }
    Ok(seconds)
}

/// Writes a deterministic synthetic corpus of the given kind into `dir`.
pub fn generate_corpus(
    kind: CorpusKind,
    dir: &Path,
    seed: u64,
    sizes: CorpusSizes,
    holdout_fraction: f64,
    force: bool,
    single_thread: bool,
) -> Result<CorpusSummary> {
    prepare_output_dir(dir, force)?;
    match kind {
        CorpusKind::Ser => {
            let mut jobs = Vec::new();
            for (c, _) in ARCHETYPES.iter().enumerate() {
                for k in 0..sizes.ser_per_class {
                    jobs.push((c, k));
                }
            }
            let waves = ordered_map(&jobs, single_thread, |&(c, k)| {
                let a = &ARCHETYPES[c];
                let mut rng = utterance_rng(seed, (c * 10_000 + k) as u64);
                (
                    format!("{}_{k:03}", a.emotion),
                    render_archetype(a, &mut rng),
                )
            });
            let seconds = save_all(dir, &waves)?;
            let rows: Vec<LabelledRow> = jobs
                .iter()
                .zip(&waves)
                .map(|(&(c, _), (id, _))| LabelledRow {
                    id: id.clone(),
                    wav_path: format!("wavs/{id}.wav"),
                    label: ARCHETYPES[c].emotion.to_string(),
                })
                .collect();
            let held = holdout_count(sizes.ser_per_class, holdout_fraction);
            let (mut train, mut holdout) = (Vec::new(), Vec::new());
            for (row, &(_, k)) in rows.iter().zip(&jobs) {
                if k + held >= sizes.ser_per_class {
                    holdout.push(row.clone());
                } else {
                    train.push(row.clone());
                }
            }
            write_labelled(&dir.join("manifest.csv"), &rows)?;
            write_labelled(&dir.join("train.csv"), &train)?;
            write_labelled(&dir.join("holdout.csv"), &holdout)?;
            Ok(CorpusSummary {
                kind,
                utterances: rows.len(),
                train: train.len(),
                holdout: holdout.len(),
                seconds,
            })
        }
        CorpusKind::Styled6 => {
            let jobs: Vec<(usize, usize)> = (0..STYLE_GROUPS.len())
                .flat_map(|g| (0..sizes.styled_per_group).map(move |k| (g, k)))
                .collect();
            let waves = ordered_map(&jobs, single_thread, |&(g, k)| {
                let mut rng = utterance_rng(seed, (g * 10_000 + k) as u64);
                (
                    format!("{}_{k:02}", STYLE_GROUPS[g]),
                    render_style_group(g, &mut rng),
                )
            });
            let seconds = save_all(dir, &waves)?;
            let rows: Vec<LabelledRow> = jobs
                .iter()
                .zip(&waves)
                .map(|(&(g, _), (id, _))| LabelledRow {
                    id: id.clone(),
                    wav_path: format!("wavs/{id}.wav"),
                    label: STYLE_GROUPS[g].to_string(),
                })
                .collect();
            write_labelled(&dir.join("manifest.csv"), &rows)?;
            Ok(CorpusSummary {
                kind,
                utterances: rows.len(),
                train: rows.len(),
                holdout: 0,
                seconds,
            })
        }
        CorpusKind::Tts => {
            let mut text_rng = utterance_rng(seed, u64::MAX);
            let mut rows = Vec::new();
            for k in 0..sizes.tts_utterances {
                let text = random_sentence(&mut text_rng);
                rows.push(TextRow {
                    id: format!("utt_{k:04}"),
                    normalized_text: normalize_text(&text)?,
                    text,
                });
            }
            let idx: Vec<usize> = (0..rows.len()).collect();
            let waves = ordered_map(&idx, single_thread, |&k| {
                let mut rng = utterance_rng(seed, k as u64);
                (
                    rows[k].id.clone(),
                    render_text(&rows[k].normalized_text, &mut rng),
                )
            });
            let seconds = save_all(dir, &waves)?;
            let held = holdout_count(rows.len(), holdout_fraction);
            let (train, holdout) = rows.split_at(rows.len() - held);
            write_text_manifest(&dir.join("metadata.csv"), &rows)?;
            write_text_manifest(&dir.join("train.csv"), train)?;
            write_text_manifest(&dir.join("holdout.csv"), holdout)?;
            Ok(CorpusSummary {
                kind,
                utterances: rows.len(),
                train: train.len(),
                holdout: holdout.len(),
                seconds,
            })
        }
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Raw log-mel frames of one WAV file.
pub fn wav_features(path: &Path, mel: &MelConfig) -> Result<Tensor> {
    Ok(mel_spectrogram(&load_wav(path)?, mel)?.frames)
}

/// Labelled utterances of a manifest, paths relative to the manifest.
pub fn load_labelled_features(
    manifest: &Path,
    mel: &MelConfig,
    single_thread: bool,
) -> Result<Vec<(LabelledRow, Tensor)>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_labelled(manifest)?;
    let feats = ordered_map(&rows, single_thread, |r| {
        wav_features(&resolve(dir, &r.wav_path), mel)
    });
    rows.into_iter()
        .zip(feats)
        .map(|(r, f)| Ok((r, f?)))
        .collect()
}

pub fn load_ser_examples(
    manifest: &Path,
    mel: &MelConfig,
    single_thread: bool,
) -> Result<Vec<SerExample>> {
    load_labelled_features(manifest, mel, single_thread)?
        .into_iter()
        .map(|(r, mel)| {
            Ok(SerExample {
                label: r.label.parse()?,
                id: r.id,
                mel,
            })
        })
        .collect()
}

/// Text rows of a pipe manifest with the raw log-mel of `wavs/<id>.wav`.
pub fn load_text_features(
    manifest: &Path,
    mel: &MelConfig,
    single_thread: bool,
) -> Result<Vec<(TextRow, Tensor)>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_text_manifest(manifest)?;
    let feats = ordered_map(&rows, single_thread, |r| {
        wav_features(&dir.join("wavs").join(format!("{}.wav", r.id)), mel)
    });
    rows.into_iter()
        .zip(feats)
        .map(|(r, f)| Ok((r, f?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::f0::voiced_median;
    use crate::dsp::{estimate_f0, F0Config, StftConfig};

    fn sizes() -> CorpusSizes {
        CorpusSizes {
            ser_per_class: 3,
            tts_utterances: 4,
            styled_per_group: 2,
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "wavs"] {
            let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            names.sort();
            for p in names {
                out.push((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
        out
    }

    #[test]
    fn same_seed_gives_identical_corpora() {
        for kind in [CorpusKind::Ser, CorpusKind::Tts, CorpusKind::Styled6] {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            generate_corpus(kind, a.path(), 5, sizes(), 0.34, false, false).unwrap();
            generate_corpus(kind, b.path(), 5, sizes(), 0.34, false, true).unwrap();
            assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()), "{kind}");
        }
    }

    #[test]
    fn existing_directory_needs_force() {
        let d = tempfile::tempdir().unwrap();
        generate_corpus(CorpusKind::Styled6, d.path(), 1, sizes(), 0.2, false, false).unwrap();
        assert!(
            generate_corpus(CorpusKind::Styled6, d.path(), 1, sizes(), 0.2, false, false).is_err()
        );
        generate_corpus(CorpusKind::Styled6, d.path(), 2, sizes(), 0.2, true, false).unwrap();
    }

    #[test]
    fn ser_archetypes_have_separated_pitch() {
        let d = tempfile::tempdir().unwrap();
        let s = generate_corpus(CorpusKind::Ser, d.path(), 3, sizes(), 0.34, false, false).unwrap();
        assert_eq!((s.utterances, s.train, s.holdout), (12, 8, 4));
        let rows = read_labelled(&d.path().join("manifest.csv")).unwrap();
        let mut means: Vec<(Emotion, f64)> = Vec::new();
        for e in Emotion::ALL {
            let mut voiced = Vec::new();
            for r in rows.iter().filter(|r| r.label == e.as_str()) {
                let w = load_wav(&d.path().join(&r.wav_path)).unwrap();
                voiced.extend(
                    estimate_f0(&w, &StftConfig::default(), &F0Config::default())
                        .unwrap()
                        .into_iter()
                        .filter(|&f| f > 0.0),
                );
            }
            means.push((e, voiced_median(&voiced).unwrap()));
        }
        means.sort_by(|a, b| a.1.total_cmp(&b.1));
        for w in means.windows(2) {
            assert!(w[1].1 - w[0].1 >= 40.0 * 0.8, "{:?}", means);
        }
        let design: Vec<f64> = Emotion::ALL.iter().map(|&e| archetype_mean_f0(e)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((design[i] - design[j]).abs() >= 40.0);
            }
        }
    }

    #[test]
    fn styled_corpus_has_six_groups_of_five() {
        let d = tempfile::tempdir().unwrap();
        let s = generate_corpus(
            CorpusKind::Styled6,
            d.path(),
            3,
            CorpusSizes::default(),
            0.2,
            false,
            false,
        )
        .unwrap();
        assert_eq!(s.utterances, 30);
        let rows = read_labelled(&d.path().join("manifest.csv")).unwrap();
        for g in STYLE_GROUPS {
            assert_eq!(rows.iter().filter(|r| r.label == g).count(), 5);
        }
    }

    #[test]
    fn text_corpus_manifest_and_lengths() {
        let d = tempfile::tempdir().unwrap();
        generate_corpus(CorpusKind::Tts, d.path(), 4, sizes(), 0.25, false, false).unwrap();
        let rows = read_text_manifest(&d.path().join("metadata.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            read_text_manifest(&d.path().join("holdout.csv"))
                .unwrap()
                .len(),
            1
        );
        for r in &rows {
            assert_eq!(normalize_text(&r.text).unwrap(), r.normalized_text);
            let w = load_wav(&d.path().join("wavs").join(format!("{}.wav", r.id))).unwrap();
            let units: usize = r
                .normalized_text
                .chars()
                .map(|c| match c {
                    'a'..='z' => 3,
                    ' ' | ',' => 2,
                    '\'' => 1,
                    _ => 4,
                })
                .sum::<usize>()
                + 4;
            assert_eq!(w.samples.len(), units * 200);
        }
    }
}

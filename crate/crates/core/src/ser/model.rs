use std::path::Path;

use rand::Rng;

use super::segment::segment_count;
use super::{SerConfig, StyleFeatures, StyleLevel};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::numerics::nn::{BatchNorm, BiLstm, Conv2d, Linear, Phase};
use crate::numerics::{ParamSet, Tape, Tensor, TensorArchive, Var};

/// Parameter layout of the recognizer inside some [`ParamSet`].
#[derive(Clone, Debug)]
pub struct SerNetwork {
    pub config: SerConfig,
    convs: Vec<Conv2d>,
    low_proj: Linear,
    blstm: BiLstm,
    middle_proj: Linear,
    attn_hidden: Linear,
    attn_score: Linear,
    fc: Linear,
    fc_norm: BatchNorm,
    output: Linear,
}

/// Activations of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct SerOutputs {
    /// `1 × classes`.
    pub logits: Var,
    pub psi_low: Var,
    pub psi_middle: Var,
    pub psi_high: Var,
    /// `S`-vector of attention weights.
    pub attention: Var,
}

impl SerOutputs {
    pub fn level(&self, level: StyleLevel) -> Var {
        match level {
            StyleLevel::Low => self.psi_low,
            StyleLevel::Middle => self.psi_middle,
            StyleLevel::High | StyleLevel::All => self.psi_high,
        }
    }
}

impl SerNetwork {
    /// Registers all parameters in `set` under `prefix`.
    pub fn new(
        set: &mut ParamSet,
        prefix: &str,
        config: SerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in config.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(
                set,
                &format!("{prefix}conv{i}"),
                in_ch,
                out_ch,
                config.kernel,
                (config.conv_time_stride, 1),
                config.padding(),
                rng,
            ));
            in_ch = out_ch;
        }
        let d = config.projection_dim;
        let h = config.lstm_hidden;
        Ok(SerNetwork {
            convs,
            low_proj: Linear::new(
                set,
                &format!("{prefix}low_proj"),
                config.slice_width(),
                d,
                true,
                rng,
            ),
            blstm: BiLstm::new(set, &format!("{prefix}blstm"), d, h, rng),
            middle_proj: Linear::new(set, &format!("{prefix}middle_proj"), 2 * h, d, true, rng),
            attn_hidden: Linear::new(
                set,
                &format!("{prefix}attn_hidden"),
                d,
                config.attention_dim,
                true,
                rng,
            ),
            attn_score: Linear::new(
                set,
                &format!("{prefix}attn_score"),
                config.attention_dim,
                1,
                false,
                rng,
            ),
            fc: Linear::new(set, &format!("{prefix}fc"), d, config.fc_units, true, rng),
            fc_norm: BatchNorm::new(set, &format!("{prefix}fc_norm"), config.fc_units),
            output: Linear::new(
                set,
                &format!("{prefix}output"),
                config.fc_units,
                config.classes,
                true,
                rng,
            ),
            config,
        })
    }

    /// Convolution stack over one `3×L×N` segment, flattened to
    /// `slices × (maps·bins)`.
    fn segment_slices(&self, tape: &mut Tape, set: &ParamSet, segment: Var) -> Result<Var> {
        let mut x = segment;
        for conv in &self.convs {
            x = conv.forward(tape, set, x)?;
            x = tape.relu(x)?;
            x = tape.maxpool2d(x)?;
        }
        let (c, t, f) = match tape.shape(x) {
            [c, t, f] => (*c, *t, *f),
            s => {
                return Err(Error::InvalidShape {
                    op: "ser_conv_stack",
                    msg: format!("unexpected output {s:?}"),
                })
            }
        };
        let x = tape.permute(x, &[1, 0, 2])?;
        tape.reshape(x, &[t, c * f])
    }

    /// `S × D` low-level features from the segments of one utterance.
    fn low_level(&self, tape: &mut Tape, set: &ParamSet, segments: &[Var]) -> Result<Var> {
        if segments.is_empty() {
            return Err(Error::invalid("ser_forward: no segments"));
        }
        let slices = segments
            .iter()
            .map(|&s| self.segment_slices(tape, set, s))
            .collect::<Result<Vec<_>>>()?;
        let rows = if slices.len() == 1 {
            slices[0]
        } else {
            tape.concat(&slices, 0)?
        };
        let projected = self.low_proj.forward(tape, set, rows)?;
        fit_rows(tape, projected, self.config.style_steps)
    }

    /// Style features of one utterance.
    pub fn style(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        segments: &[Var],
    ) -> Result<(Var, Var, Var, Var)> {
        let psi_low = self.low_level(tape, set, segments)?;
        let recurrent = self.blstm.forward(tape, set, psi_low)?;
        let psi_middle = self.middle_proj.forward(tape, set, recurrent)?;
        let hidden = self.attn_hidden.forward(tape, set, psi_middle)?;
        let hidden = tape.tanh(hidden)?;
        let scores = self.attn_score.forward(tape, set, hidden)?;
        let scores = tape.reshape(scores, &[self.config.style_steps])?;
        let attention = tape.softmax(scores, 0)?;
        // weight every row of Ψ_middle by its attention value
        let columns = tape.transpose(psi_middle)?;
        let weighted = tape.mul(columns, attention)?;
        let psi_high = tape.transpose(weighted)?;
        Ok((psi_low, psi_middle, psi_high, attention))
    }

    /// Class logits (`B × classes`) from pooled high-level rows (`B × D`).
    pub fn classify(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        pooled: Var,
        phase: Phase,
    ) -> Result<Var> {
        let h = self.fc.forward(tape, set, pooled)?;
        let h = self.fc_norm.forward(tape, set, h, phase)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, set, h)
    }

    fn pooled(&self, tape: &mut Tape, psi_high: Var) -> Result<Var> {
        let m = tape.mean_axis(psi_high, 0)?;
        tape.reshape(m, &[1, self.config.projection_dim])
    }

    /// Full forward pass over the segments of one utterance.
    pub fn forward(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        segments: &[Var],
        phase: Phase,
    ) -> Result<SerOutputs> {
        let (psi_low, psi_middle, psi_high, attention) = self.style(tape, set, segments)?;
        let pooled = self.pooled(tape, psi_high)?;
        let logits = self.classify(tape, set, pooled, phase)?;
        Ok(SerOutputs {
            logits,
            psi_low,
            psi_middle,
            psi_high,
            attention,
        })
    }

    /// Logits for a batch where each sample is its own list of segments.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        samples: &[Vec<Var>],
        phase: Phase,
    ) -> Result<Var> {
        let pooled = samples
            .iter()
            .map(|segs| {
                let (_, _, high, _) = self.style(tape, set, segs)?;
                self.pooled(tape, high)
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat(&pooled, 0)?
        };
        self.classify(tape, set, rows, phase)
    }
}

/// Center-truncates or zero-pads the rows of an `R×D` matrix to `rows`.
fn fit_rows(tape: &mut Tape, x: Var, rows: usize) -> Result<Var> {
    let r = tape.shape(x)[0];
    if r > rows {
        tape.slice(x, 0, (r - rows) / 2, rows)
    } else {
        tape.pad_rows(x, rows)
    }
}

/// Maps a `T×N` log-mel matrix onto recognizer input segments.
///
/// When `source` is given, `mel` is first taken out of that normalization
/// (`x·σ + μ`); it is then normalized with the recognizer's statistics,
/// stacked with its deltas and segmented. Every step is a tape operation,
/// so gradients reach `mel`.
pub fn style_input(
    tape: &mut Tape,
    mel: Var,
    source: Option<&NormStats>,
    ser_stats: &NormStats,
    config: &SerConfig,
) -> Result<Vec<Var>> {
    let shape = tape.shape(mel).to_vec();
    if shape.len() != 2 || shape[1] != config.n_mels {
        return Err(Error::InvalidShape {
            op: "style_input",
            msg: format!("expected T×{} mel, got {shape:?}", config.n_mels),
        });
    }
    let mut x = mel;
    if let Some(src) = source {
        let scale = tape.constant(Tensor::from_vec(src.scales()))?;
        let shift = tape.constant(Tensor::from_vec(src.mel_mean.clone()))?;
        x = tape.mul(x, scale)?;
        x = tape.add(x, shift)?;
    }
    let mean = tape.constant(Tensor::from_vec(ser_stats.mel_mean.clone()))?;
    let std = tape.constant(Tensor::from_vec(ser_stats.scales()))?;
    x = tape.sub(x, mean)?;
    x = tape.div(x, std)?;
    let stack = tape.delta_stack(x)?;
    let t = shape[0];
    let len = config.segment_frames;
    let count = segment_count(t, config);
    let mut segments = Vec::with_capacity(count);
    for s in 0..count {
        let start = s * len;
        let take = len.min(t - start);
        let mut seg = tape.slice(stack, 1, start, take)?;
        if take < len {
            let zeros = tape.constant(Tensor::zeros(&[3, len - take, config.n_mels]))?;
            seg = tape.concat(&[seg, zeros], 1)?;
        }
        segments.push(seg);
    }
    Ok(segments)
}

/// Trained recognizer: network layout, weights and input statistics.
#[derive(Clone, Debug)]
pub struct SerModel {
    pub network: SerNetwork,
    pub params: ParamSet,
    /// Statistics of the raw log-mel training features.
    pub stats: NormStats,
}

const CHECKPOINT_KIND: &str = "ser";

impl SerModel {
    pub fn new(config: SerConfig, stats: NormStats, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let network = SerNetwork::new(&mut params, "", config, rng)?;
        Ok(SerModel {
            network,
            params,
            stats,
        })
    }

    pub fn config(&self) -> &SerConfig {
        &self.network.config
    }

    /// Freezes the weights so forward passes produce no parameter gradients.
    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    /// Inference-mode forward pass over a raw log-mel matrix.
    pub fn run(&self, tape: &mut Tape, mel: Var, source: Option<&NormStats>) -> Result<SerOutputs> {
        let segments = style_input(tape, mel, source, &self.stats, self.config())?;
        self.network
            .forward(tape, &self.params, &segments, Phase::Infer)
    }

    /// Class probabilities for a raw log-mel matrix.
    pub fn predict(&self, mel: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let m = tape.constant(mel.clone())?;
        let out = self.run(&mut tape, m, None)?;
        let p = tape.softmax(out.logits, 1)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.network.config,
            "stats": self.stats,
        });
        let mut archive = TensorArchive::new(meta);
        for (name, t) in self.params.named_tensors() {
            archive.push(format!("ser/{name}"), t.clone());
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: Default::default(),
            msg,
        };
        if archive.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(bad("not a recognizer checkpoint".into()));
        }
        let config: SerConfig = serde_json::from_value(archive.meta["config"].clone())?;
        let stats: NormStats = serde_json::from_value(archive.meta["stats"].clone())?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = SerModel::new(config, stats, &mut rng)?;
        model.params.load_named(archive.with_prefix("ser/"))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = TensorArchive::load(path)?;
        Self::from_archive(&archive).map_err(|e| match e {
            Error::Checkpoint { msg, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

use rand::SeedableRng;

/// Style features of a raw log-mel matrix at one level, or all three for
/// [`StyleLevel::All`]. Runs the same tape operations as the differentiable
/// path with the input held constant.
pub fn extract_style(
    model: &SerModel,
    mel: &Tensor,
    level: StyleLevel,
    source: Option<&NormStats>,
    source_id: &str,
) -> Result<Vec<StyleFeatures>> {
    let mut tape = Tape::new();
    let m = tape.constant(mel.clone())?;
    let segments = style_input(&mut tape, m, source, &model.stats, model.config())?;
    let (low, middle, high, _) = model.network.style(&mut tape, &model.params, &segments)?;
    let pick = |l: StyleLevel| match l {
        StyleLevel::Low => low,
        StyleLevel::Middle => middle,
        _ => high,
    };
    Ok(level
        .components()
        .iter()
        .map(|&l| StyleFeatures {
            level: l,
            matrix: tape.value(pick(l)).clone(),
            source_id: source_id.to_string(),
        })
        .collect())
}

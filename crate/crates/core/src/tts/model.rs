use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainingMode, TtsConfig};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::numerics::nn::{
    BatchNorm, BiLstm, Conv1d, Embedding, Linear, LstmParams, LstmState, Phase,
};
use crate::numerics::{ParamSet, Tape, Tensor, TensorArchive, Var};
use crate::ser::{style_input, SerConfig, SerModel, SerNetwork, StyleLevel};

/// Initial stop-logit bias; keeps an untrained decoder from halting at once.
const STOP_BIAS_INIT: f64 = -3.0;

/// Encoder states plus their attention projection, computed once per utterance.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMemory {
    /// `L × memory_dim`.
    pub states: Var,
    projected: Var,
    pub len: usize,
}

#[derive(Clone, Debug)]
struct LocationAttention {
    query: Linear,
    memory: Linear,
    location_conv: Conv1d,
    location: Linear,
    score: Linear,
}

/// Projects pooled reference style features and appends them to every
/// encoder state.
#[derive(Clone, Debug)]
pub struct StyleConditioner {
    /// Recognizer copy living in the synthesis parameter set.
    pub encoder: SerNetwork,
    projection: Linear,
    level: StyleLevel,
}

impl StyleConditioner {
    /// Encoder states `L×d` plus style features → `L×(d + projection)`.
    pub fn condition(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        states: Var,
        style: &[Var],
    ) -> Result<Var> {
        let mut pooled = Vec::with_capacity(style.len());
        for &psi in style {
            let m = tape.mean_axis(psi, 0)?;
            let width = tape.shape(m)[0];
            pooled.push(tape.reshape(m, &[1, width])?);
        }
        let joined = if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat(&pooled, 1)?
        };
        let v = self.projection.forward(tape, set, joined)?;
        let rows = tape.shape(states)[0];
        let tiled = tape.repeat_row(v, rows)?;
        tape.concat(&[states, tiled], 1)
    }

    /// Style features of a reference mel given in the synthesis feature domain.
    pub fn reference_style(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        reference: Var,
        source: &NormStats,
        ser_stats: &NormStats,
    ) -> Result<Vec<Var>> {
        let segments = style_input(
            tape,
            reference,
            Some(source),
            ser_stats,
            &self.encoder.config,
        )?;
        let (low, middle, high, _) = self.encoder.style(tape, set, &segments)?;
        Ok(self
            .level
            .components()
            .iter()
            .map(|l| match l {
                StyleLevel::Low => low,
                StyleLevel::Middle => middle,
                _ => high,
            })
            .collect())
    }
}

/// Parameter layout of the acoustic model.
#[derive(Clone, Debug)]
pub struct TtsNetwork {
    pub config: TtsConfig,
    embedding: Embedding,
    encoder_convs: Vec<(Conv1d, BatchNorm)>,
    encoder_lstm: BiLstm,
    pub style: Option<StyleConditioner>,
    attention: LocationAttention,
    prenet: [Linear; 2],
    decoder_lstm: [LstmParams; 2],
    mel_projection: Linear,
    stop_projection: Linear,
    postnet: Vec<Conv1d>,
}

/// Tape handles of one teacher-forced or free-running pass.
#[derive(Clone, Copy, Debug)]
pub struct TtsOutputs {
    /// `T×mel` decoder output before the post-net.
    pub pre: Var,
    /// `T×mel` post-net stack output.
    pub residual: Var,
    /// `pre + residual`.
    pub post: Var,
    /// `T×1`.
    pub stop_logits: Var,
    /// `T×L`.
    pub attention: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    StopToken,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    pub mel_pre: Tensor,
    pub mel_post: Tensor,
    pub residual: Tensor,
    pub stop_probabilities: Vec<f64>,
    pub attention: Tensor,
    pub halt: HaltReason,
}

impl SynthesisResult {
    pub fn frames(&self) -> usize {
        self.mel_post.rows()
    }
}

impl TtsNetwork {
    pub fn new(
        set: &mut ParamSet,
        config: TtsConfig,
        recognizer: Option<&SerConfig>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let embedding = Embedding::new(
            set,
            "embedding",
            c.charset.chars().count(),
            c.embedding_dim,
            rng,
        );
        let mut encoder_convs = Vec::new();
        let mut width = c.embedding_dim;
        for i in 0..c.encoder_conv_layers {
            let conv = Conv1d::new(
                set,
                &format!("encoder.conv{i}"),
                width,
                c.encoder_conv_channels,
                c.encoder_conv_width,
                rng,
            );
            let bn = BatchNorm::new(set, &format!("encoder.bn{i}"), c.encoder_conv_channels);
            encoder_convs.push((conv, bn));
            width = c.encoder_conv_channels;
        }
        let encoder_lstm = BiLstm::new(set, "encoder.lstm", width, c.encoder_lstm_hidden, rng);
        let style = match c.mode {
            TrainingMode::St => {
                let ser = recognizer.ok_or_else(|| {
                    Error::invalid("style-conditioned model needs a recognizer configuration")
                })?;
                let encoder = SerNetwork::new(set, "style.", ser.clone(), rng)?;
                let pooled = ser.projection_dim * c.style_level.components().len();
                Some(StyleConditioner {
                    encoder,
                    projection: Linear::new(
                        set,
                        "style_projection",
                        pooled,
                        c.style_projection_dim,
                        true,
                        rng,
                    ),
                    level: c.style_level,
                })
            }
            _ => None,
        };
        let mem = c.memory_dim();
        let hd = c.decoder_lstm_dim;
        let attention = LocationAttention {
            query: Linear::new(set, "attention.query", hd, c.attention_dim, false, rng),
            memory: Linear::new(set, "attention.memory", mem, c.attention_dim, true, rng),
            location_conv: Conv1d::new(
                set,
                "attention.location_conv",
                1,
                c.location_filters,
                c.location_width,
                rng,
            ),
            location: Linear::new(
                set,
                "attention.location",
                c.location_filters,
                c.attention_dim,
                false,
                rng,
            ),
            score: Linear::new(set, "attention.score", c.attention_dim, 1, false, rng),
        };
        let prenet = [
            Linear::new(set, "prenet.0", c.mel_channels, c.prenet_dim, true, rng),
            Linear::new(set, "prenet.1", c.prenet_dim, c.prenet_dim, true, rng),
        ];
        let decoder_lstm = [
            LstmParams::new(set, "decoder.lstm0", c.prenet_dim + mem, hd, rng),
            LstmParams::new(set, "decoder.lstm1", hd + mem, hd, rng),
        ];
        let mel_projection =
            Linear::new(set, "mel_projection", hd + mem, c.mel_channels, true, rng);
        let stop_projection = Linear::new(set, "stop_projection", hd + mem, 1, true, rng);
        set.set_value(
            stop_projection.bias.expect("stop bias"),
            Tensor::from_vec(vec![STOP_BIAS_INIT]),
        )?;
        let mut postnet = Vec::new();
        for i in 0..c.postnet_layers {
            let inp = if i == 0 {
                c.mel_channels
            } else {
                c.postnet_channels
            };
            let out = if i + 1 == c.postnet_layers {
                c.mel_channels
            } else {
                c.postnet_channels
            };
            postnet.push(Conv1d::new(
                set,
                &format!("postnet.conv{i}"),
                inp,
                out,
                c.postnet_width,
                rng,
            ));
        }
        Ok(TtsNetwork {
            config,
            embedding,
            encoder_convs,
            encoder_lstm,
            style,
            attention,
            prenet,
            decoder_lstm,
            mel_projection,
            stop_projection,
            postnet,
        })
    }

    /// Character ids → `L × encoder_dim` states.
    pub fn encode(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        ids: &[usize],
        phase: Phase,
    ) -> Result<Var> {
        let vocab = self.config.charset.chars().count();
        if let Some(position) = ids.iter().position(|&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "character id {} at position {position} outside a vocabulary of {vocab}",
                ids[position]
            )));
        }
        if ids.is_empty() {
            return Err(Error::invalid("encode: empty character sequence"));
        }
        let mut x = self.embedding.forward(tape, set, ids)?;
        for (conv, bn) in &self.encoder_convs {
            x = conv.forward(tape, set, x)?;
            x = bn.forward(tape, set, x, phase)?;
            x = tape.relu(x)?;
        }
        self.encoder_lstm.forward(tape, set, x)
    }

    pub fn memory(&self, tape: &mut Tape, set: &ParamSet, states: Var) -> Result<AttentionMemory> {
        let len = tape.shape(states)[0];
        let projected = self.attention.memory.forward(tape, set, states)?;
        Ok(AttentionMemory {
            states,
            projected,
            len,
        })
    }

    /// Location-sensitive additive attention. `cumulative` is the `L`-vector
    /// of summed past weights; returns the `1×d` context and the weights.
    pub fn attention_step(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        query: Var,
        memory: &AttentionMemory,
        cumulative: Var,
    ) -> Result<(Var, Var)> {
        let a = &self.attention;
        let q = a.query.forward(tape, set, query)?;
        let q = tape.reshape(q, &[self.config.attention_dim])?;
        let loc = tape.reshape(cumulative, &[memory.len, 1])?;
        let loc = a.location_conv.forward(tape, set, loc)?;
        let loc = a.location.forward(tape, set, loc)?;
        let e = tape.add(memory.projected, loc)?;
        let e = tape.add(e, q)?;
        let e = tape.tanh(e)?;
        let scores = a.score.forward(tape, set, e)?;
        let scores = tape.reshape(scores, &[memory.len])?;
        let weights = tape.softmax(scores, 0)?;
        let row = tape.reshape(weights, &[1, memory.len])?;
        let context = tape.matmul(row, memory.states)?;
        Ok((context, weights))
    }

    fn prenet(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        frames: Var,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let drop = phase == Phase::Train || self.config.prenet_dropout_at_inference;
        let mut x = frames;
        for layer in &self.prenet {
            x = layer.forward(tape, set, x)?;
            x = tape.relu(x)?;
            if drop {
                x = tape.dropout(x, self.config.prenet_dropout, rng)?;
            }
        }
        Ok(x)
    }

    /// Post-net residual for `T×mel` frames.
    pub fn postnet(&self, tape: &mut Tape, set: &ParamSet, frames: Var) -> Result<Var> {
        let mut x = frames;
        let last = self.postnet.len() - 1;
        for (i, conv) in self.postnet.iter().enumerate() {
            x = conv.forward(tape, set, x)?;
            if i != last {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }

    /// One decoder step from a pre-net output row. Returns the `1×(H+d)`
    /// projection input and the attention weights.
    #[allow(clippy::too_many_arguments)]
    fn decoder_step(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        prenet_row: Var,
        memory: &AttentionMemory,
        states: &mut [LstmState; 2],
        context: &mut Var,
        cumulative: &mut Var,
    ) -> Result<(Var, Var)> {
        let x1 = tape.concat(&[prenet_row, *context], 1)?;
        states[0] = self.decoder_lstm[0].cell(tape, set, x1, states[0])?;
        let (ctx, weights) = self.attention_step(tape, set, states[0].h, memory, *cumulative)?;
        *cumulative = tape.add(*cumulative, weights)?;
        *context = ctx;
        let x2 = tape.concat(&[states[0].h, ctx], 1)?;
        states[1] = self.decoder_lstm[1].cell(tape, set, x2, states[1])?;
        let out = tape.concat(&[states[1].h, ctx], 1)?;
        Ok((out, weights))
    }

    fn initial_decoder_state(
        &self,
        tape: &mut Tape,
        memory: &AttentionMemory,
    ) -> Result<([LstmState; 2], Var, Var)> {
        let states = [
            self.decoder_lstm[0].zero_state(tape)?,
            self.decoder_lstm[1].zero_state(tape)?,
        ];
        let width = tape.shape(memory.states)[1];
        let context = tape.constant(Tensor::zeros(&[1, width]))?;
        let cumulative = tape.constant(Tensor::zeros(&[memory.len]))?;
        Ok((states, context, cumulative))
    }

    fn finish(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        outs: &[Var],
        weights: &[Var],
    ) -> Result<TtsOutputs> {
        let outs = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(outs, 0)?
        };
        let pre = self.mel_projection.forward(tape, set, outs)?;
        let stop_logits = self.stop_projection.forward(tape, set, outs)?;
        let len = tape.shape(weights[0])[0];
        let rows = weights
            .iter()
            .map(|&w| tape.reshape(w, &[1, len]))
            .collect::<Result<Vec<_>>>()?;
        let attention = if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat(&rows, 0)?
        };
        let residual = self.postnet(tape, set, pre)?;
        let post = tape.add(pre, residual)?;
        Ok(TtsOutputs {
            pre,
            residual,
            post,
            stop_logits,
            attention,
        })
    }

    /// Teacher-forced decoding: step `t` sees target frame `t−1` (zeros at
    /// `t = 0`). Output length equals the target length.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        memory: &AttentionMemory,
        target: Var,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<TtsOutputs> {
        let shape = tape.shape(target).to_vec();
        if shape.len() != 2 || shape[1] != self.config.mel_channels || shape[0] == 0 {
            return Err(Error::InvalidShape {
                op: "decode_teacher_forced",
                msg: format!(
                    "expected T×{} target with T ≥ 1, got {shape:?}",
                    self.config.mel_channels
                ),
            });
        }
        let frames = shape[0];
        let zero = tape.constant(Tensor::zeros(&[1, self.config.mel_channels]))?;
        let inputs = if frames == 1 {
            zero
        } else {
            let head = tape.slice(target, 0, 0, frames - 1)?;
            tape.concat(&[zero, head], 0)?
        };
        let prenet_rows = self.prenet(tape, set, inputs, phase, rng)?;
        let (mut states, mut context, mut cumulative) = self.initial_decoder_state(tape, memory)?;
        let mut outs = Vec::with_capacity(frames);
        let mut weights = Vec::with_capacity(frames);
        for t in 0..frames {
            let p = tape.row(prenet_rows, t)?;
            let (o, w) = self.decoder_step(
                tape,
                set,
                p,
                memory,
                &mut states,
                &mut context,
                &mut cumulative,
            )?;
            outs.push(o);
            weights.push(w);
        }
        self.finish(tape, set, &outs, &weights)
    }

    /// Free-running decoding that feeds back each predicted frame. Stops when
    /// the stop probability exceeds the threshold or after `max_steps`.
    pub fn decode_free_running(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        memory: &AttentionMemory,
        max_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TtsOutputs, HaltReason)> {
        if max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        let (mut states, mut context, mut cumulative) = self.initial_decoder_state(tape, memory)?;
        let mut prev = tape.constant(Tensor::zeros(&[1, self.config.mel_channels]))?;
        let mut outs = Vec::new();
        let mut weights = Vec::new();
        let mut halt = HaltReason::MaxSteps;
        for _ in 0..max_steps {
            let p = self.prenet(tape, set, prev, Phase::Infer, rng)?;
            let (o, w) = self.decoder_step(
                tape,
                set,
                p,
                memory,
                &mut states,
                &mut context,
                &mut cumulative,
            )?;
            outs.push(o);
            weights.push(w);
            let frame = self.mel_projection.forward(tape, set, o)?;
            let stop = self.stop_projection.forward(tape, set, o)?;
            let stop = tape.sigmoid(stop)?;
            prev = tape.constant(tape.value(frame).clone())?;
            if tape.item(stop) > self.config.stop_threshold {
                halt = HaltReason::StopToken;
                break;
            }
        }
        Ok((self.finish(tape, set, &outs, &weights)?, halt))
    }
}

/// Acoustic model with its parameters and feature statistics.
#[derive(Clone, Debug)]
pub struct TtsModel {
    pub network: TtsNetwork,
    pub params: ParamSet,
    /// Statistics of the raw log-mel targets; the model works in the
    /// normalized domain.
    pub stats: NormStats,
    /// Recognizer input statistics, present in style-conditioned mode.
    pub ser_stats: Option<NormStats>,
}

const CHECKPOINT_KIND: &str = "tts";

impl TtsModel {
    /// Style-conditioned mode copies `recognizer`'s weights into the model,
    /// where they are trained further.
    pub fn new(
        config: TtsConfig,
        stats: NormStats,
        recognizer: Option<&SerModel>,
        seed: u64,
    ) -> Result<Self> {
        if config.mode == TrainingMode::St && recognizer.is_none() {
            return Err(Error::invalid(
                "style-conditioned mode needs a trained recognizer",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let ser_config = recognizer
            .filter(|_| config.mode == TrainingMode::St)
            .map(|r| r.config().clone());
        let network = TtsNetwork::new(&mut params, config, ser_config.as_ref(), &mut rng)?;
        let mut ser_stats = None;
        if let (Some(ser), Some(_)) = (recognizer, &network.style) {
            params.copy_prefixed(&ser.params, "", "style.")?;
            ser_stats = Some(ser.stats.clone());
        }
        Ok(TtsModel {
            network,
            params,
            stats,
            ser_stats,
        })
    }

    pub fn config(&self) -> &TtsConfig {
        &self.network.config
    }

    /// Encoder states, conditioned on the reference style in ST mode.
    pub fn encode(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        reference: Option<Var>,
        phase: Phase,
    ) -> Result<Var> {
        let states = self.network.encode(tape, &self.params, ids, phase)?;
        match (&self.network.style, reference) {
            (None, _) => Ok(states),
            (Some(_), None) => Err(Error::invalid(
                "style-conditioned synthesis needs a reference utterance",
            )),
            (Some(style), Some(r)) => {
                let ser_stats = self
                    .ser_stats
                    .as_ref()
                    .expect("ST models carry recognizer stats");
                let psi = style.reference_style(tape, &self.params, r, &self.stats, ser_stats)?;
                style.condition(tape, &self.params, states, &psi)
            }
        }
    }

    /// Teacher-forced pass over a normalized target. `reference` (same
    /// domain) is required in ST mode and ignored otherwise.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        target: Var,
        reference: Option<Var>,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<TtsOutputs> {
        let states = self.encode(tape, ids, reference, phase)?;
        let memory = self.network.memory(tape, &self.params, states)?;
        self.network
            .decode_teacher_forced(tape, &self.params, &memory, target, phase, rng)
    }

    /// Synthesizes normalized mel frames. `seed` only matters when pre-net
    /// dropout is kept on at inference.
    pub fn infer(
        &self,
        ids: &[usize],
        reference: Option<&Tensor>,
        max_steps: usize,
        seed: u64,
    ) -> Result<SynthesisResult> {
        let mut tape = Tape::new();
        let reference = reference.map(|r| tape.constant(r.clone())).transpose()?;
        let states = self.encode(&mut tape, ids, reference, Phase::Infer)?;
        let memory = self.network.memory(&mut tape, &self.params, states)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, halt) = self.network.decode_free_running(
            &mut tape,
            &self.params,
            &memory,
            max_steps,
            &mut rng,
        )?;
        let stop = tape.sigmoid(out.stop_logits)?;
        Ok(SynthesisResult {
            mel_pre: tape.value(out.pre).clone(),
            mel_post: tape.value(out.post).clone(),
            residual: tape.value(out.residual).clone(),
            stop_probabilities: tape.value(stop).data().to_vec(),
            attention: tape.value(out.attention).clone(),
            halt,
        })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let ser_config = self
            .network
            .style
            .as_ref()
            .map(|s| s.encoder.config.clone());
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.network.config,
            "stats": self.stats,
            "ser_stats": self.ser_stats,
            "ser_config": ser_config,
        });
        let mut archive = TensorArchive::new(meta);
        for (name, t) in self.params.named_tensors() {
            archive.push(format!("tts/{name}"), t.clone());
        }
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        if archive.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint {
                path: Default::default(),
                msg: "not a synthesis checkpoint".into(),
            });
        }
        let config: TtsConfig = serde_json::from_value(archive.meta["config"].clone())?;
        let stats: NormStats = serde_json::from_value(archive.meta["stats"].clone())?;
        let ser_stats: Option<NormStats> =
            serde_json::from_value(archive.meta["ser_stats"].clone())?;
        let ser_config: Option<SerConfig> =
            serde_json::from_value(archive.meta["ser_config"].clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let network = TtsNetwork::new(&mut params, config, ser_config.as_ref(), &mut rng)?;
        params.load_named(archive.with_prefix("tts/"))?;
        Ok(TtsModel {
            network,
            params,
            stats,
            ser_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{gradient_check, spread_coords};
    use crate::tts::{encode_text, CHARSET};
    use rand::Rng;

    fn desk(mode: TrainingMode) -> (TtsModel, Option<SerModel>) {
        let cfg = TtsConfig::desk().with_mode(mode, StyleLevel::Low);
        let ser = (mode == TrainingMode::St).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            SerModel::new(SerConfig::desk(), NormStats::identity(40), &mut rng).unwrap()
        });
        (
            TtsModel::new(cfg, NormStats::identity(40), ser.as_ref(), 7).unwrap(),
            ser,
        )
    }

    fn random_mel(frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![frames, 40],
            (0..frames * 40)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn micro_config() -> TtsConfig {
        TtsConfig {
            charset: "ab ".into(),
            embedding_dim: 3,
            encoder_conv_layers: 1,
            encoder_conv_channels: 3,
            encoder_conv_width: 3,
            encoder_lstm_hidden: 2,
            attention_dim: 3,
            location_filters: 2,
            location_width: 3,
            prenet_dim: 3,
            prenet_dropout: 0.0,
            decoder_lstm_dim: 3,
            postnet_layers: 2,
            postnet_channels: 2,
            postnet_width: 3,
            ..TtsConfig::desk()
        }
    }

    #[test]
    fn single_character_encodes_to_one_state() {
        let (m, _) = desk(TrainingMode::Baseline);
        let mut tape = Tape::new();
        let s = m.encode(&mut tape, &[4], None, Phase::Infer).unwrap();
        assert_eq!(tape.shape(s), &[1, 32]);
    }

    #[test]
    fn encoding_is_deterministic_and_sensitive() {
        let (m, _) = desk(TrainingMode::Baseline);
        let run = |text: &str| {
            let mut tape = Tape::new();
            let ids = encode_text(text, CHARSET).unwrap();
            let s = m.encode(&mut tape, &ids, None, Phase::Infer).unwrap();
            tape.value(s).clone()
        };
        assert_eq!(run("hello there"), run("hello there"));
        assert!(run("hello there").max_abs_diff(&run("hallo there")) > 0.0);
    }

    #[test]
    fn single_state_attention_is_trivial() {
        let (m, _) = desk(TrainingMode::Baseline);
        let mut tape = Tape::new();
        let states = m.encode(&mut tape, &[1], None, Phase::Infer).unwrap();
        let memory = m.network.memory(&mut tape, &m.params, states).unwrap();
        let q = tape
            .constant(random_mel(1, 3).reshape(vec![40]).unwrap())
            .unwrap();
        let q = tape.slice(q, 0, 0, 40).unwrap();
        let q = tape.reshape(q, &[1, 40]).unwrap();
        let q = tape.slice(q, 1, 0, 40).unwrap();
        let proj = tape.constant(Tensor::full(&[40, 64], 0.01)).unwrap();
        let q = tape.matmul(q, proj).unwrap();
        let cum = tape.constant(Tensor::zeros(&[1])).unwrap();
        let (ctx, w) = m
            .network
            .attention_step(&mut tape, &m.params, q, &memory, cum)
            .unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(ctx).data(), tape.value(states).data());
    }

    #[test]
    fn teacher_forcing_shapes_and_residual() {
        let (m, _) = desk(TrainingMode::Baseline);
        let mut tape = Tape::new();
        let target = tape.constant(random_mel(9, 4)).unwrap();
        let ids = encode_text("a cat.", CHARSET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = m
            .teacher_forced(&mut tape, &ids, target, None, Phase::Train, &mut rng)
            .unwrap();
        assert_eq!(tape.shape(out.post), &[9, 40]);
        assert_eq!(tape.shape(out.stop_logits), &[9, 1]);
        assert_eq!(tape.shape(out.attention), &[9, ids.len()]);
        for r in 0..9 {
            let s: f64 = tape.value(out.attention).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let (pre, res, post) = (
            tape.value(out.pre),
            tape.value(out.residual),
            tape.value(out.post),
        );
        for i in 0..pre.numel() {
            assert_eq!(post.data()[i], pre.data()[i] + res.data()[i]);
        }
    }

    #[test]
    fn zero_weights_give_zero_decoder_output() {
        let (mut m, _) = desk(TrainingMode::Baseline);
        for id in m.params.ids().collect::<Vec<_>>() {
            let shape = m.params.value(id).shape().to_vec();
            m.params.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::zeros(&[4, 40])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = m
            .teacher_forced(&mut tape, &[0, 1], target, None, Phase::Infer, &mut rng)
            .unwrap();
        assert!(tape.value(out.pre).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_inference_runs_to_the_step_limit() {
        let (m, _) = desk(TrainingMode::Baseline);
        let ids = encode_text("hi there", CHARSET).unwrap();
        let r = m.infer(&ids, None, 5, 0).unwrap();
        assert_eq!(r.frames(), 5);
        assert_eq!(r.halt, HaltReason::MaxSteps);
        assert!(r.stop_probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(r, m.infer(&ids, None, 5, 0).unwrap());
    }

    #[test]
    fn style_mode_requires_reference_and_widens_memory() {
        let (m, _) = desk(TrainingMode::St);
        let ids = encode_text("yes", CHARSET).unwrap();
        assert!(m.infer(&ids, None, 3, 0).is_err());
        let mut tape = Tape::new();
        let r1 = tape.constant(random_mel(30, 5)).unwrap();
        let a = m.encode(&mut tape, &ids, Some(r1), Phase::Infer).unwrap();
        assert_eq!(tape.shape(a), &[3, 48]);
        let r2 = tape.constant(random_mel(30, 6).map(|v| 3.0 * v)).unwrap();
        let b = m.encode(&mut tape, &ids, Some(r2), Phase::Infer).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) > 0.0);
    }

    #[test]
    fn zero_style_vector_appends_zeros() {
        let (mut m, _) = desk(TrainingMode::St);
        let style = m.network.style.clone().unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            if m.params.name(id).starts_with("style_projection") {
                let shape = m.params.value(id).shape().to_vec();
                m.params.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut tape = Tape::new();
        let states = tape
            .constant(random_mel(4, 8).reshape(vec![4, 40]).unwrap())
            .unwrap();
        let states = tape.slice(states, 1, 0, 32).unwrap();
        let psi = tape.constant(Tensor::zeros(&[12, 16])).unwrap();
        let out = style
            .condition(&mut tape, &m.params, states, &[psi])
            .unwrap();
        let (s, o) = (tape.value(states), tape.value(out));
        for r in 0..4 {
            assert_eq!(&o.row(r)[..32], s.row(r));
            assert!(o.row(r)[32..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_inference() {
        for mode in [TrainingMode::Baseline, TrainingMode::St] {
            let (m, _) = desk(mode);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("tts.ckpt");
            m.save(&p).unwrap();
            let l = TtsModel::load(&p).unwrap();
            let r = random_mel(20, 2);
            let reference = (mode == TrainingMode::St).then_some(&r);
            assert_eq!(
                m.infer(&[3, 4], reference, 4, 0).unwrap(),
                l.infer(&[3, 4], reference, 4, 0).unwrap()
            );
        }
    }

    #[test]
    fn two_step_decoder_gradients_match_finite_differences() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = TtsNetwork::new(&mut set, micro_config(), None, &mut rng).unwrap();
        // zero biases on a zero input frame put relu exactly at its kink
        for id in set.ids().collect::<Vec<_>>() {
            if set.name(id).ends_with(".bias") {
                let v = set.value(id).map(|x| x + 0.13);
                set.set_value(id, v).unwrap();
            }
        }
        let target = Tensor::new(
            vec![2, 40],
            (0..80).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.4).collect(),
        )
        .unwrap();
        let loss = |t: &mut Tape, set: &ParamSet| -> Result<Var> {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let states = net.encode(t, set, &[0, 1, 2], Phase::Infer)?;
            let memory = net.memory(t, set, states)?;
            let y = t.constant(target.clone())?;
            let out = net.decode_teacher_forced(t, set, &memory, y, Phase::Infer, &mut rng)?;
            let a = t.mse(out.post, y)?;
            let b = t.bce_with_logits(out.stop_logits, &[0.0, 1.0])?;
            t.add(a, b)
        };
        for id in set.ids().collect::<Vec<_>>() {
            if !set.is_trainable(id) {
                continue;
            }
            let value = set.value(id).clone();
            let coords = spread_coords(value.numel(), 8);
            let r = gradient_check(
                &|t: &mut Tape, pv| {
                    t.bind_param(&set, id, pv)?;
                    loss(t, &set)
                },
                &value,
                1e-6,
                Some(&coords),
            )
            .unwrap();
            assert!(
                r.max_relative_error < 1e-3,
                "{}: {}",
                set.name(id),
                r.max_relative_error
            );
        }
    }
}

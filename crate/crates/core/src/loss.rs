//! Training objectives: frame reconstruction, style reconstruction and
//! their sum, plus the per-step trajectory log.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::ser::{extract_style, style_input, SerModel, StyleLevel};
use crate::tts::{TrainingMode, TtsOutputs};

/// Mean over frames and channels of the squared difference.
pub fn mel_mse(tape: &mut Tape, target: Var, generated: Var) -> Result<Var> {
    if tape.shape(target) != tape.shape(generated) {
        return Err(Error::ShapeMismatch {
            op: "loss_frame",
            lhs: tape.shape(target).to_vec(),
            rhs: tape.shape(generated).to_vec(),
        });
    }
    tape.mse(generated, target)
}

/// Stop targets: 1 on the last frame, 0 elsewhere.
pub fn stop_targets(frames: usize) -> Vec<f64> {
    let mut t = vec![0.0; frames];
    if let Some(last) = t.last_mut() {
        *last = 1.0;
    }
    t
}

/// Frame loss `mse(pre) + mse(post) + stop` and the stop term alone.
pub fn loss_frame(tape: &mut Tape, target: Var, outputs: &TtsOutputs) -> Result<(Var, Var)> {
    let pre = mel_mse(tape, target, outputs.pre)?;
    let post = mel_mse(tape, target, outputs.post)?;
    let frames = tape.shape(target)[0];
    let stop = tape.bce_with_logits(outputs.stop_logits, &stop_targets(frames))?;
    let mel = tape.add(pre, post)?;
    let frame = tape.add(mel, stop)?;
    Ok((frame, stop))
}

/// Maps generated frames in the synthesis feature domain onto recognizer
/// input segments, keeping the graph to `generated`.
pub fn style_adapter(
    tape: &mut Tape,
    generated: Var,
    source: &NormStats,
    recognizer: &SerModel,
) -> Result<Vec<Var>> {
    style_input(
        tape,
        generated,
        Some(source),
        &recognizer.stats,
        recognizer.config(),
    )
}

/// Mean squared distance between the style features of `reference` and
/// `generated` at `level`; the three-level setting sums the three distances.
/// Reference features are constants; the recognizer must be frozen.
pub fn loss_style(
    tape: &mut Tape,
    reference: &Tensor,
    generated: Var,
    recognizer: &SerModel,
    source: &NormStats,
    level: StyleLevel,
) -> Result<Var> {
    if !recognizer.params.is_frozen() {
        return Err(Error::invalid("style loss needs a frozen recognizer"));
    }
    let targets = extract_style(recognizer, reference, level, Some(source), "")?;
    let segments = style_adapter(tape, generated, source, recognizer)?;
    let (low, middle, high, _) = recognizer
        .network
        .style(tape, &recognizer.params, &segments)?;
    let mut total: Option<Var> = None;
    for t in targets {
        let psi = match t.level {
            StyleLevel::Low => low,
            StyleLevel::Middle => middle,
            _ => high,
        };
        let r = tape.constant(t.matrix)?;
        let d = tape.mse(psi, r)?;
        total = Some(match total {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
    }
    Ok(total.expect("every level has a component"))
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub frame: f64,
    pub style: f64,
    pub stop: f64,
    pub total: f64,
    pub level: StyleLevel,
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub frame: Var,
    pub style: Var,
    pub stop: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape, level: StyleLevel) -> LossBreakdown {
        LossBreakdown {
            frame: tape.item(self.frame),
            style: tape.item(self.style),
            stop: tape.item(self.stop),
            total: tape.item(self.total),
            level,
        }
    }
}

/// `frame + style`. Only the PL mode has a style term; it is a zero
/// constant otherwise. `target` and `outputs` live in the normalized domain
/// described by `source`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    tape: &mut Tape,
    mode: TrainingMode,
    level: StyleLevel,
    target: &Tensor,
    target_var: Var,
    outputs: &TtsOutputs,
    recognizer: Option<&SerModel>,
    source: &NormStats,
) -> Result<LossTerms> {
    let (frame, stop) = loss_frame(tape, target_var, outputs)?;
    let style = match mode {
        TrainingMode::Pl => {
            let ser = recognizer
                .ok_or_else(|| Error::invalid("style loss needs a recognizer checkpoint"))?;
            loss_style(tape, target, outputs.post, ser, source, level)?
        }
        _ => tape.constant(Tensor::scalar(0.0))?,
    };
    let total = tape.add(frame, style)?;
    Ok(LossTerms {
        frame,
        style,
        stop,
        total,
    })
}

/// One row of the training trajectory CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub mode: TrainingMode,
    pub level: String,
    pub frame: f64,
    pub style: f64,
    pub stop: f64,
    pub total: f64,
    pub lr: f64,
}

impl TrajectoryRow {
    pub fn new(step: u64, mode: TrainingMode, b: &LossBreakdown, lr: f64) -> Self {
        TrajectoryRow {
            step,
            mode,
            level: b.level.as_str().to_string(),
            frame: b.frame,
            style: b.style,
            stop: b.stop,
            total: b.total,
            lr,
        }
    }
}

/// Appends trajectory rows to a CSV file with header
/// `step,mode,level,frame,style,stop,total,lr`.
pub struct TrajectoryWriter {
    writer: csv::Writer<File>,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TrajectoryWriter {
            writer: csv::Writer::from_writer(file),
        })
    }

    /// Opens an existing log for appending (no header is written).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TrajectoryWriter {
            writer: csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file),
        })
    }

    pub fn write(&mut self, row: &TrajectoryRow) -> Result<()> {
        self.writer.serialize(row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io(Path::new("trajectory"), e))
    }
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{gradient_check, spread_coords};
    use crate::numerics::{ParamSet, Phase};
    use crate::ser::SerConfig;
    use crate::tts::{TtsConfig, TtsModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn frozen_ser(config: SerConfig, seed: u64) -> SerModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = NormStats {
            mel_mean: (0..40).map(|i| -3.0 + 0.05 * i as f64).collect(),
            mel_std: (0..40).map(|i| 1.0 + 0.02 * i as f64).collect(),
        };
        let mut m = SerModel::new(config, stats, &mut rng).unwrap();
        m.freeze();
        m
    }

    fn tts_stats() -> NormStats {
        NormStats {
            mel_mean: (0..40).map(|i| -5.0 + 0.1 * i as f64).collect(),
            mel_std: vec![2.0; 40],
        }
    }

    fn micro_ser() -> SerConfig {
        SerConfig {
            segment_frames: 8,
            max_segments: 2,
            n_mels: 40,
            conv_channels: vec![2],
            kernel: (3, 3),
            conv_time_stride: 1,
            projection_dim: 3,
            style_steps: 4,
            lstm_hidden: 2,
            attention_dim: 3,
            fc_units: 4,
            classes: 4,
        }
    }

    #[test]
    fn one_frame_unit_difference_has_unit_mel_term() {
        let mut tape = Tape::new();
        let y = tape
            .constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let g = tape
            .constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let l = mel_mse(&mut tape, y, g).unwrap();
        assert_eq!(tape.item(l), 1.0);
    }

    #[test]
    fn mel_term_is_length_invariant_for_equal_per_frame_error() {
        let mut tape = Tape::new();
        let y1 = tape.constant(random(&[3, 40], 1, 1.0)).unwrap();
        let g1 = tape.add_scalar(y1, 0.5).unwrap();
        let y2 = tape.concat(&[y1, y1], 0).unwrap();
        let g2 = tape.concat(&[g1, g1], 0).unwrap();
        let a = mel_mse(&mut tape, y1, g1).unwrap();
        let b = mel_mse(&mut tape, y2, g2).unwrap();
        assert!((tape.item(a) - tape.item(b)).abs() < 1e-15);
        let bad = tape.constant(Tensor::zeros(&[2, 40])).unwrap();
        assert!(mel_mse(&mut tape, y1, bad).is_err());
    }

    #[test]
    fn adapter_reproduces_extraction_bitwise() {
        let ser = frozen_ser(SerConfig::desk(), 2);
        let y = random(&[70, 40], 3, 1.0);
        let stats = tts_stats();
        let mut tape = Tape::new();
        let v = tape.variable(y.clone()).unwrap();
        let segs = style_adapter(&mut tape, v, &stats, &ser).unwrap();
        let (l, m, h, _) = ser.network.style(&mut tape, &ser.params, &segs).unwrap();
        let reference = extract_style(&ser, &y, StyleLevel::All, Some(&stats), "").unwrap();
        assert_eq!(tape.value(l), &reference[0].matrix);
        assert_eq!(tape.value(m), &reference[1].matrix);
        assert_eq!(tape.value(h), &reference[2].matrix);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let ser = frozen_ser(micro_ser(), 4);
        let stats = tts_stats();
        let y = random(&[11, 40], 5, 1.0);
        let weights = random(&[3, 8, 40], 6, 1.0);
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let segs = style_adapter(t, x, &stats, &ser)?;
            let w = t.constant(weights.clone())?;
            let mut acc = None;
            for s in segs {
                let p = t.mul(s, w)?;
                let p = t.sum(p)?;
                acc = Some(match acc {
                    None => p,
                    Some(a) => t.add(a, p)?,
                });
            }
            Ok(acc.unwrap())
        };
        let r = gradient_check(&f, &y, 1e-6, None).unwrap();
        assert!(r.max_relative_error < 1e-4, "{}", r.max_relative_error);
    }

    #[test]
    fn style_loss_properties() {
        let ser = frozen_ser(SerConfig::desk(), 7);
        let stats = tts_stats();
        let y = random(&[50, 40], 8, 1.0);
        let mut perturbed = y.data().to_vec();
        for v in &mut perturbed[400..440] {
            *v += 0.7;
        }
        let p = Tensor::new(vec![50, 40], perturbed).unwrap();
        let value = |a: &Tensor, b: &Tensor, level| {
            let mut tape = Tape::new();
            let v = tape.variable(b.clone()).unwrap();
            let l = loss_style(&mut tape, a, v, &ser, &stats, level).unwrap();
            tape.item(l)
        };
        for level in [
            StyleLevel::Low,
            StyleLevel::Middle,
            StyleLevel::High,
            StyleLevel::All,
        ] {
            assert_eq!(value(&y, &y, level), 0.0);
            assert_eq!(value(&y, &p, level), value(&p, &y, level));
        }
        let sum = value(&y, &p, StyleLevel::Low)
            + value(&y, &p, StyleLevel::Middle)
            + value(&y, &p, StyleLevel::High);
        assert_eq!(value(&y, &p, StyleLevel::All), sum);
        assert!(value(&y, &p, StyleLevel::Low) > 0.0);

        let mut tape = Tape::new();
        let v = tape.variable(p).unwrap();
        let l = loss_style(&mut tape, &y, v, &ser, &stats, StyleLevel::All).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.param_grads(&ser.params).iter().all(Option::is_none));
        assert!(tape.grad(v).unwrap().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn unfrozen_recognizer_is_rejected() {
        let mut ser = frozen_ser(SerConfig::desk(), 9);
        ser.params.set_frozen(false);
        let mut tape = Tape::new();
        let y = random(&[10, 40], 1, 1.0);
        let v = tape.variable(y.clone()).unwrap();
        assert!(loss_style(&mut tape, &y, v, &ser, &tts_stats(), StyleLevel::Low).is_err());
    }

    fn micro_tts(mode: TrainingMode, ser: Option<&SerModel>) -> TtsModel {
        let cfg = TtsConfig {
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
            style_projection_dim: 2,
            ..TtsConfig::desk()
        }
        .with_mode(mode, StyleLevel::Low);
        let mut m = TtsModel::new(cfg, tts_stats(), ser, 11).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            if m.params.name(id).ends_with(".bias") {
                let v = m.params.value(id).map(|x| x + 0.13);
                m.params.set_value(id, v).unwrap();
            }
        }
        m
    }

    #[test]
    fn total_is_frame_plus_style_bitwise() {
        let ser = frozen_ser(micro_ser(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (i, mode) in (0..50).map(|i| (i, TrainingMode::ALL[i % 3])) {
            let tts = micro_tts(mode, Some(&ser));
            let frames = rng.random_range(1..6);
            let y = random(&[frames, 40], 100 + i as u64, 1.0);
            let mut tape = Tape::new();
            let yv = tape.constant(y.clone()).unwrap();
            let reference = (mode == TrainingMode::St).then_some(yv);
            let mut drop = ChaCha8Rng::seed_from_u64(0);
            let out = tts
                .teacher_forced(
                    &mut tape,
                    &[0, 2, 1],
                    yv,
                    reference,
                    Phase::Train,
                    &mut drop,
                )
                .unwrap();
            let terms = loss_total(
                &mut tape,
                mode,
                StyleLevel::Low,
                &y,
                yv,
                &out,
                Some(&ser),
                &tts.stats,
            )
            .unwrap();
            let b = terms.breakdown(&tape, StyleLevel::Low);
            assert_eq!(b.total, b.frame + b.style);
            assert_eq!(b.total - (b.frame + b.style), 0.0);
            if mode != TrainingMode::Pl {
                assert_eq!(b.style, 0.0);
            }
        }
    }

    #[test]
    fn perfect_prediction_gives_near_zero_loss() {
        let mut tape = Tape::new();
        let y = random(&[4, 40], 14, 1.0);
        let yv = tape.constant(y.clone()).unwrap();
        let zero = tape.constant(Tensor::zeros(&[4, 40])).unwrap();
        let stop = tape
            .constant(Tensor::new(vec![4, 1], vec![-40.0, -40.0, -40.0, 40.0]).unwrap())
            .unwrap();
        let att = tape.constant(Tensor::ones(&[4, 1])).unwrap();
        let out = TtsOutputs {
            pre: yv,
            residual: zero,
            post: yv,
            stop_logits: stop,
            attention: att,
        };
        let ser = frozen_ser(SerConfig::desk(), 15);
        let terms = loss_total(
            &mut tape,
            TrainingMode::Pl,
            StyleLevel::All,
            &y,
            yv,
            &out,
            Some(&ser),
            &tts_stats(),
        )
        .unwrap();
        assert!(tape.item(terms.total) < 1e-15);
        assert!(loss_total(
            &mut tape,
            TrainingMode::Pl,
            StyleLevel::Low,
            &y,
            yv,
            &out,
            None,
            &tts_stats()
        )
        .is_err());
    }

    fn end_to_end_check(mode: TrainingMode) {
        let ser = frozen_ser(micro_ser(), 16);
        let tts = micro_tts(mode, Some(&ser));
        let y = random(&[3, 40], 17, 1.0);
        let set: &ParamSet = &tts.params;
        for id in set.ids().collect::<Vec<_>>() {
            if !set.is_trainable(id) {
                continue;
            }
            let value = set.value(id).clone();
            let coords = spread_coords(value.numel(), 4);
            let r = gradient_check(
                &|t: &mut Tape, pv| {
                    t.bind_param(set, id, pv)?;
                    let yv = t.constant(y.clone())?;
                    let reference = (mode == TrainingMode::St).then_some(yv);
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let out =
                        tts.teacher_forced(t, &[1, 0], yv, reference, Phase::Infer, &mut rng)?;
                    let terms = loss_total(
                        t,
                        mode,
                        StyleLevel::All,
                        &y,
                        yv,
                        &out,
                        Some(&ser),
                        &tts.stats,
                    )?;
                    Ok(terms.total)
                },
                &value,
                1e-6,
                Some(&coords),
            )
            .unwrap();
            assert!(
                r.max_relative_error < 1e-3,
                "{mode} {}: {}",
                set.name(id),
                r.max_relative_error
            );
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_pl() {
        end_to_end_check(TrainingMode::Pl);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_st() {
        end_to_end_check(TrainingMode::St);
    }

    #[test]
    fn style_mode_fine_tunes_recognizer_copy_and_pl_does_not() {
        let ser = frozen_ser(SerConfig::desk(), 18);
        let y = random(&[20, 40], 19, 1.0);
        for mode in [TrainingMode::Pl, TrainingMode::St] {
            let tts = TtsModel::new(
                TtsConfig::desk().with_mode(mode, StyleLevel::Low),
                tts_stats(),
                Some(&ser),
                3,
            )
            .unwrap();
            let mut tape = Tape::new();
            let yv = tape.constant(y.clone()).unwrap();
            let reference = (mode == TrainingMode::St).then_some(yv);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = tts
                .teacher_forced(&mut tape, &[0, 1, 2], yv, reference, Phase::Train, &mut rng)
                .unwrap();
            let terms = loss_total(
                &mut tape,
                mode,
                StyleLevel::Low,
                &y,
                yv,
                &out,
                Some(&ser),
                &tts.stats,
            )
            .unwrap();
            tape.backward(terms.total).unwrap();
            assert!(tape.param_grads(&ser.params).iter().all(Option::is_none));
            let grads = tape.param_grads(&tts.params);
            let style_grad = tts.params.ids().zip(&grads).any(|(id, g)| {
                tts.params.name(id).starts_with("style.conv0")
                    && g.as_ref()
                        .is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
            });
            assert_eq!(style_grad, mode == TrainingMode::St, "{mode}");
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        let b = LossBreakdown {
            frame: 1.5,
            style: 0.25,
            stop: 0.5,
            total: 1.75,
            level: StyleLevel::All,
        };
        let mut w = TrajectoryWriter::create(&p).unwrap();
        w.write(&TrajectoryRow::new(3, TrainingMode::Pl, &b, 1e-3))
            .unwrap();
        w.flush().unwrap();
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,mode,level,frame,style,stop,total,lr\n3,pl,LMH,"));
        let rows = read_trajectory(&p).unwrap();
        assert_eq!(rows[0].total, 1.75);
    }
}

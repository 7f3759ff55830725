use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::{load_ser_examples, load_text_features};
use super::{write_json, write_run_record, write_timing};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::loss::{loss_total, LossBreakdown, TrajectoryRow, TrajectoryWriter};
use crate::numerics::{Adam, Phase, Tape, Tensor, TensorArchive};
use crate::ser::{train_ser, SerModel};
use crate::tts::{encode_text, TrainingMode, TtsModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerRunSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub train_utterances: usize,
    pub holdout_utterances: usize,
    pub config_hash: String,
}

#[derive(Serialize)]
struct SerTrajectoryRow {
    step: usize,
    loss: f64,
    lr: f64,
}

/// Trains the emotion recognizer on `corpus/train.csv`, scoring
/// `corpus/holdout.csv` when present.
pub fn run_train_ser(
    cfg: &RunConfig,
    corpus: &Path,
    out_dir: &Path,
    single_thread: bool,
) -> Result<SerRunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    create_dir(out_dir)?;
    let train = load_ser_examples(&corpus.join("train.csv"), &cfg.mel, single_thread)?;
    let holdout_path = corpus.join("holdout.csv");
    let holdout = if holdout_path.exists() {
        load_ser_examples(&holdout_path, &cfg.mel, single_thread)?
    } else {
        Vec::new()
    };
    let traj_path = out_dir.join("ser_trajectory.csv");
    let mut traj = csv::Writer::from_path(&traj_path)?;
    let mut write_err = None;
    let (model, report) = train_ser(
        &train,
        &holdout,
        &cfg.ser,
        &cfg.ser_train,
        cfg.seed,
        |step, loss, lr| {
            if let Err(e) = traj.serialize(SerTrajectoryRow { step, loss, lr }) {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    traj.flush().map_err(|e| Error::io(&traj_path, e))?;

    let hash = cfg.hash();
    let mut archive = model.to_archive()?;
    archive.meta["config_hash"] = hash.clone().into();
    archive.save(&out_dir.join("ser.ckpt"))?;
    model.stats.save_json(&out_dir.join("ser_stats.json"))?;
    let summary = SerRunSummary {
        steps: report.steps,
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        train_accuracy: report.train_accuracy,
        holdout_accuracy: report.holdout_accuracy,
        train_utterances: train.len(),
        holdout_utterances: holdout.len(),
        config_hash: hash,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_run_record(out_dir, cfg)?;
    write_timing(out_dir, started)?;
    Ok(summary)
}

/// One training utterance: character ids and normalized log-mel target.
#[derive(Clone, Debug)]
pub struct TtsExample {
    pub id: String,
    pub ids: Vec<usize>,
    pub mel: Tensor,
}

/// Loads `corpus/train.csv` and returns normalized examples and the raw
/// feature statistics of that split.
pub fn load_tts_examples(
    cfg: &RunConfig,
    corpus: &Path,
    single_thread: bool,
) -> Result<(Vec<TtsExample>, NormStats)> {
    let rows = load_text_features(&corpus.join("train.csv"), &cfg.mel, single_thread)?;
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no training utterances",
            corpus.display()
        )));
    }
    let stats = NormStats::from_corpus(rows.iter().map(|(_, m)| m))?;
    let examples = rows
        .into_iter()
        .map(|(row, mel)| {
            Ok(TtsExample {
                ids: encode_text(&row.normalized_text, &cfg.tts.charset)?,
                mel: stats.normalize(&mel)?,
                id: row.id,
            })
        })
        .collect::<Result<_>>()?;
    Ok((examples, stats))
}

/// Model, optimizer and step counter of one acoustic-model run.
pub struct TtsTrainer {
    pub model: TtsModel,
    pub adam: Adam,
    /// Updates applied so far.
    pub step: u64,
    recognizer: Option<SerModel>,
    seed: u64,
    batch_size: usize,
    momentum: f64,
    config_hash: String,
}

/// Loads and freezes the recognizer a mode needs; errors when the mode
/// needs one and `path` is missing.
pub fn load_recognizer(mode: TrainingMode, path: Option<&Path>) -> Result<Option<SerModel>> {
    if !mode.needs_recognizer() {
        return Ok(None);
    }
    let path = path.ok_or_else(|| {
        Error::invalid(format!(
            "mode {mode} needs a recognizer checkpoint (--ser-ckpt)"
        ))
    })?;
    if !path.exists() {
        return Err(Error::invalid(format!(
            "recognizer checkpoint {} does not exist",
            path.display()
        )));
    }
    let mut model = SerModel::load(path)?;
    model.freeze();
    Ok(Some(model))
}

impl TtsTrainer {
    pub fn new(cfg: &RunConfig, stats: NormStats, recognizer: Option<SerModel>) -> Result<Self> {
        let mode = cfg.tts.mode;
        if mode.needs_recognizer() && recognizer.is_none() {
            return Err(Error::invalid(format!("mode {mode} needs a recognizer")));
        }
        let model = TtsModel::new(cfg.tts.clone(), stats, recognizer.as_ref(), cfg.seed)?;
        let adam = Adam::new(cfg.tts_train.optimizer, &model.params);
        Ok(TtsTrainer {
            model,
            adam,
            step: 0,
            recognizer: recognizer.filter(|_| mode == TrainingMode::Pl),
            seed: cfg.seed,
            batch_size: cfg.tts_train.batch_size,
            momentum: cfg.tts_train.batch_norm_momentum,
            config_hash: cfg.hash(),
        })
    }

    /// Restores model, optimizer moments and step from a checkpoint.
    pub fn resume(cfg: &RunConfig, path: &Path, recognizer: Option<SerModel>) -> Result<Self> {
        let archive = TensorArchive::load(path)?;
        let model = TtsModel::from_archive(&archive)?;
        if model.config() != &cfg.tts {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "model config differs from the run config".into(),
            });
        }
        let mut trainer = Self::new(cfg, model.stats.clone(), recognizer)?;
        trainer.model = model;
        let state: Vec<(String, Tensor)> = archive
            .with_prefix("")
            .filter(|(n, _)| n.starts_with("adam/"))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        trainer.adam.load_state(&trainer.model.params, &state)?;
        trainer.step = archive.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "missing step in checkpoint meta".into(),
            })?;
        Ok(trainer)
    }

    /// Generator owned by one step, independent of earlier steps.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step + 1);
        rng
    }

    /// One optimizer update on a random minibatch. Returns the batch loss
    /// and the learning rate used.
    pub fn train_step(&mut self, data: &[TtsExample]) -> Result<(LossBreakdown, f64)> {
        if data.is_empty() {
            return Err(Error::invalid("train_step: empty training set"));
        }
        let mut rng = self.step_rng();
        let picks = index::sample(&mut rng, data.len(), self.batch_size.min(data.len())).into_vec();
        let cfg = self.model.config().clone();
        let mut tape = Tape::new();
        let (mut frames, mut styles, mut stops) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &picks {
            let ex = &data[i];
            let target = tape.constant(ex.mel.clone())?;
            let reference = (cfg.mode == TrainingMode::St).then_some(target);
            let outputs = self.model.teacher_forced(
                &mut tape,
                &ex.ids,
                target,
                reference,
                Phase::Train,
                &mut rng,
            )?;
            let terms = loss_total(
                &mut tape,
                cfg.mode,
                cfg.style_level,
                &ex.mel,
                target,
                &outputs,
                self.recognizer.as_ref(),
                &self.model.stats,
            )?;
            frames.push(terms.frame);
            styles.push(terms.style);
            stops.push(terms.stop);
        }
        let inv = 1.0 / picks.len() as f64;
        let mean =
            |tape: &mut Tape, vars: &[crate::numerics::Var]| -> Result<crate::numerics::Var> {
                let mut acc = vars[0];
                for &v in &vars[1..] {
                    acc = tape.add(acc, v)?;
                }
                tape.scale(acc, inv)
            };
        let frame = mean(&mut tape, &frames)?;
        let style = mean(&mut tape, &styles)?;
        let stop = mean(&mut tape, &stops)?;
        let total = tape.add(frame, style)?;
        tape.backward(total)?;
        let grads = tape.param_grads(&self.model.params);
        let lr = self.adam.step(&mut self.model.params, &grads)?;
        self.model
            .params
            .apply_batch_norm_updates(&tape, self.momentum);
        self.step += 1;
        let breakdown = LossBreakdown {
            frame: tape.item(frame),
            style: tape.item(style),
            stop: tape.item(stop),
            total: tape.item(total),
            level: cfg.style_level,
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        Ok((breakdown, lr))
    }

    /// Model archive plus optimizer state, step and config hash.
    pub fn checkpoint(&self) -> TensorArchive {
        let mut archive = self.model.to_archive();
        archive.meta["step"] = self.step.into();
        archive.meta["config_hash"] = self.config_hash.clone().into();
        for (name, t) in self.adam.state_tensors(&self.model.params) {
            archive.push(name, t);
        }
        archive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtsRunSummary {
    pub mode: TrainingMode,
    pub level: String,
    pub start_step: u64,
    pub steps: u64,
    pub final_frame: f64,
    pub final_style: f64,
    pub final_stop: f64,
    pub final_total: f64,
    /// Mean frame loss over the first and last ten logged steps.
    pub frame_head_mean: f64,
    pub frame_tail_mean: f64,
    pub train_utterances: usize,
    pub config_hash: String,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("step_{step:06}.ckpt"))
}

/// Trains the acoustic model in the configured mode. With `resume`, the
/// run continues from that checkpoint and the trajectory log in `out_dir`
/// is cut back to the resumed step.
pub fn run_train_tts(
    cfg: &RunConfig,
    corpus: &Path,
    ser_ckpt: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
    single_thread: bool,
    mut on_step: impl FnMut(u64, &LossBreakdown),
) -> Result<TtsRunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let recognizer = load_recognizer(cfg.tts.mode, ser_ckpt)?;
    let (data, stats) = load_tts_examples(cfg, corpus, single_thread)?;
    create_dir(&out_dir.join("checkpoints"))?;
    let mut trainer = match resume {
        Some(p) => TtsTrainer::resume(cfg, p, recognizer)?,
        None => TtsTrainer::new(cfg, stats, recognizer)?,
    };
    let start_step = trainer.step;
    let traj_path = out_dir.join("trajectory.csv");
    let mut rows: Vec<TrajectoryRow> = Vec::new();
    let mut writer = if start_step > 0 && traj_path.exists() {
        let kept: Vec<TrajectoryRow> = crate::loss::read_trajectory(&traj_path)?
            .into_iter()
            .filter(|r| r.step <= start_step)
            .collect();
        let mut w = TrajectoryWriter::create(&traj_path)?;
        for r in &kept {
            w.write(r)?;
        }
        rows.extend(kept);
        w
    } else {
        TrajectoryWriter::create(&traj_path)?
    };
    trainer
        .model
        .stats
        .save_json(&out_dir.join("mel_stats.json"))?;
    let every = cfg.tts_train.checkpoint_every;
    while trainer.step < cfg.tts_train.steps {
        let (b, lr) = trainer.train_step(&data)?;
        let row = TrajectoryRow::new(trainer.step, cfg.tts.mode, &b, lr);
        writer.write(&row)?;
        rows.push(row);
        on_step(trainer.step, &b);
        if every > 0 && trainer.step % every == 0 {
            trainer
                .checkpoint()
                .save(&checkpoint_path(out_dir, trainer.step))?;
        }
    }
    writer.flush()?;
    trainer.checkpoint().save(&out_dir.join("model.ckpt"))?;

    let last = rows
        .last()
        .ok_or_else(|| Error::invalid("train-tts: zero steps requested"))?;
    let window =
        |rs: &[TrajectoryRow]| rs.iter().map(|r| r.frame).sum::<f64>() / rs.len().max(1) as f64;
    let k = rows.len().min(10);
    let summary = TtsRunSummary {
        mode: cfg.tts.mode,
        level: cfg.tts.style_level.as_str().to_string(),
        start_step,
        steps: trainer.step,
        final_frame: last.frame,
        final_style: last.style,
        final_stop: last.stop,
        final_total: last.total,
        frame_head_mean: window(&rows[..k]),
        frame_tail_mean: window(&rows[rows.len() - k..]),
        train_utterances: data.len(),
        config_hash: cfg.hash(),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_run_record(out_dir, cfg)?;
    write_timing(out_dir, started)?;
    Ok(summary)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Profile;
    use crate::pipeline::corpus::{generate_corpus, CorpusKind, CorpusSizes};

    fn tiny(mode: TrainingMode) -> RunConfig {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.mode = mode;
        cfg.tts_train.steps = 4;
        cfg.tts_train.batch_size = 2;
        cfg.tts_train.checkpoint_every = 2;
        cfg.resolved()
    }

    fn corpus() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        let sizes = CorpusSizes {
            tts_utterances: 4,
            ..CorpusSizes::default()
        };
        generate_corpus(CorpusKind::Tts, d.path(), 3, sizes, 0.25, true, true).unwrap();
        d
    }

    #[test]
    fn resume_reproduces_next_step_bitwise() {
        let c = corpus();
        let cfg = tiny(TrainingMode::Baseline);
        let out = tempfile::tempdir().unwrap();
        run_train_tts(&cfg, c.path(), None, out.path(), None, true, |_, _| {}).unwrap();
        let full = crate::loss::read_trajectory(&out.path().join("trajectory.csv")).unwrap();
        assert_eq!(full.len(), 4);
        assert!(full.iter().all(|r| r.style == 0.0));

        let (data, _) = load_tts_examples(&cfg, c.path(), true).unwrap();
        let mut t = TtsTrainer::resume(&cfg, &checkpoint_path(out.path(), 2), None).unwrap();
        assert_eq!(t.step, 2);
        let (b, _) = t.train_step(&data).unwrap();
        assert_eq!(b.total.to_bits(), full[2].total.to_bits());
        assert_eq!(b.frame.to_bits(), full[2].frame.to_bits());

        let resumed = tempfile::tempdir().unwrap();
        std::fs::copy(
            out.path().join("trajectory.csv"),
            resumed.path().join("trajectory.csv"),
        )
        .unwrap();
        run_train_tts(
            &cfg,
            c.path(),
            None,
            resumed.path(),
            Some(&checkpoint_path(out.path(), 2)),
            true,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(
            std::fs::read(out.path().join("model.ckpt")).unwrap(),
            std::fs::read(resumed.path().join("model.ckpt")).unwrap()
        );
        assert_eq!(
            std::fs::read(out.path().join("trajectory.csv")).unwrap(),
            std::fs::read(resumed.path().join("trajectory.csv")).unwrap()
        );
    }

    #[test]
    fn style_modes_need_a_recognizer_before_training() {
        let c = corpus();
        for mode in [TrainingMode::Pl, TrainingMode::St] {
            let out = tempfile::tempdir().unwrap();
            let err = run_train_tts(
                &tiny(mode),
                c.path(),
                None,
                out.path(),
                None,
                true,
                |_, _| {},
            )
            .unwrap_err();
            assert!(err.to_string().contains("recognizer"), "{err}");
            let missing = out.path().join("nope.ckpt");
            assert!(run_train_tts(
                &tiny(mode),
                c.path(),
                Some(&missing),
                out.path(),
                None,
                true,
                |_, _| {}
            )
            .is_err());
            assert!(!out.path().join("trajectory.csv").exists());
        }
    }
}

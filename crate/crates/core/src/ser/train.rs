use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::style_input;
use super::{Emotion, SerConfig, SerModel};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Phase, Tape, Tensor, Var};

/// One labelled utterance as raw (unnormalized) log-mel frames.
#[derive(Clone, Debug)]
pub struct SerExample {
    pub id: String,
    pub mel: Tensor,
    pub label: Emotion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerTrainConfig {
    pub steps: usize,
    /// Segments per update.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub batch_norm_momentum: f64,
}

impl SerTrainConfig {
    /// Minibatch of 40 segments, Nesterov Adam at 1e-4.
    pub fn full() -> Self {
        let mut optimizer = AdamConfig::new(1e-4);
        optimizer.nesterov = true;
        SerTrainConfig {
            steps: 20_000,
            batch_size: 40,
            optimizer,
            batch_norm_momentum: 0.9,
        }
    }

    pub fn desk() -> Self {
        let mut optimizer = AdamConfig::new(3e-3);
        optimizer.nesterov = true;
        SerTrainConfig {
            steps: 200,
            batch_size: 16,
            optimizer,
            batch_norm_momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerTrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    /// `None` without holdout data.
    pub holdout_accuracy: Option<f64>,
}

fn accuracy(model: &SerModel, data: &[SerExample]) -> Result<f64> {
    let mut correct = 0;
    for ex in data {
        let p = model.predict(&ex.mel)?;
        let best = (0..p.len())
            .max_by(|&a, &b| p[a].total_cmp(&p[b]))
            .expect("at least one class");
        if best == ex.label.index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains on segments: every segment of an utterance is a sample carrying
/// the utterance label. Normalization statistics come from `train` only.
pub fn train_ser(
    train: &[SerExample],
    holdout: &[SerExample],
    config: &SerConfig,
    train_config: &SerTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64, f64),
) -> Result<(SerModel, SerTrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("train_ser: empty training set"));
    }
    let stats = NormStats::from_corpus(train.iter().map(|e| &e.mel))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SerModel::new(config.clone(), stats, &mut rng)?;

    // Pre-segment once; segment tensors are constants of every step.
    let mut pool: Vec<(Tensor, usize)> = Vec::new();
    for ex in train {
        let mut tape = Tape::new();
        let m = tape.constant(ex.mel.clone())?;
        for seg in style_input(&mut tape, m, None, &model.stats, config)? {
            pool.push((tape.value(seg).clone(), ex.label.index()));
        }
    }

    let mut adam = Adam::new(train_config.optimizer, &model.params);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(train_config.steps);
    for step in 0..train_config.steps {
        let mut batch = Vec::with_capacity(train_config.batch_size);
        while batch.len() < train_config.batch_size.min(pool.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let samples: Vec<Vec<Var>> = batch
            .iter()
            .map(|&i| tape.constant(pool[i].0.clone()).map(|v| vec![v]))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| pool[i].1).collect();
        let logits =
            model
                .network
                .forward_batch(&mut tape, &model.params, &samples, Phase::Train)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        tape.backward(loss)?;
        let grads = tape.param_grads(&model.params);
        let lr = adam.step(&mut model.params, &grads)?;
        model
            .params
            .apply_batch_norm_updates(&tape, train_config.batch_norm_momentum);
        let value = tape.item(loss);
        losses.push(value);
        on_step(step, value, lr);
    }

    let report = SerTrainReport {
        steps: train_config.steps,
        train_accuracy: accuracy(&model, train)?,
        holdout_accuracy: if holdout.is_empty() {
            None
        } else {
            Some(accuracy(&model, holdout)?)
        },
        losses,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_class_corpus_is_learned_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train: Vec<SerExample> = (0..4)
            .map(|i| SerExample {
                id: format!("u{i}"),
                mel: Tensor::new(
                    vec![50, 40],
                    (0..2000).map(|_| rng.random_range(-2.0..0.0)).collect(),
                )
                .unwrap(),
                label: Emotion::Sad,
            })
            .collect();
        let mut cfg = SerTrainConfig::desk();
        cfg.steps = 60;
        cfg.batch_size = 4;
        let (_, report) =
            train_ser(&train, &[], &SerConfig::desk(), &cfg, 2, |_, _, _| {}).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        let last = *report.losses.last().unwrap();
        assert!(last < 0.05, "final cross-entropy {last}");
        assert!(report.holdout_accuracy.is_none());
    }
}

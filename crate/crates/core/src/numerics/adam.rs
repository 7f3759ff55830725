//! Adam and Nesterov-corrected Adam with an exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Constant learning rate up to `decay_start`, then exponential decay that
/// reaches `floor` at `decay_end` and stays there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub floor: f64,
    pub decay_start: u64,
    pub decay_end: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base: lr,
            floor: lr,
            decay_start: u64::MAX,
            decay_end: u64::MAX,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step <= self.decay_start || self.decay_end <= self.decay_start {
            return self.base;
        }
        let span = (self.decay_end - self.decay_start) as f64;
        let rate = (self.floor / self.base).powf(1.0 / span);
        let lr = self.base * rate.powf((step - self.decay_start) as f64);
        lr.max(self.floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient, scaled by the current lr.
    pub weight_decay: f64,
    /// Use the Nesterov-corrected first moment (Nadam).
    pub nesterov: bool,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            nesterov: false,
            schedule: LrSchedule::constant(lr),
        }
    }
}

/// Optimizer state bound to one [`ParamSet`] layout.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, set: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = set
            .ids()
            .map(|id| vec![0.0; set.value(id).numel()])
            .collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.at(self.step)
    }

    /// Applies one update and returns the learning rate used. Parameters
    /// with no gradient (buffers, frozen sets, unused weights) keep their
    /// value and moments.
    pub fn step(&mut self, set: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<f64> {
        if grads.len() != set.len() || self.first.len() != set.len() {
            return Err(Error::invalid(format!(
                "adam_step: {} gradients for {} parameters ({} moment slots)",
                grads.len(),
                set.len(),
                self.first.len()
            )));
        }
        let lr = self.current_lr();
        let c = self.config;
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc1_next = 1.0 - c.beta1.powf(t + 1.0);
        let bc2 = 1.0 - c.beta2.powf(t);
        let ids: Vec<_> = set.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if !set.is_trainable(id) {
                continue;
            }
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            let mut p = set.value(id).clone().into_data();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = if c.nesterov {
                    c.beta1 * m[i] / bc1_next + (1.0 - c.beta1) * gi / bc1
                } else {
                    m[i] / bc1
                };
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
            let shape = set.value(id).shape().to_vec();
            set.set_value(id, Tensor::from_parts(shape, p))?;
        }
        self.step += 1;
        Ok(lr)
    }

    /// Named moment tensors for checkpointing, shaped like their parameters.
    pub fn state_tensors(&self, set: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * set.len() + 1);
        for (k, (name, t)) in set.named_tensors().enumerate() {
            let shape = t.shape().to_vec();
            out.push((
                format!("adam/m/{name}"),
                Tensor::from_parts(shape.clone(), self.first[k].clone()),
            ));
            out.push((
                format!("adam/v/{name}"),
                Tensor::from_parts(shape, self.second[k].clone()),
            ));
        }
        out.push(("adam/step".into(), Tensor::scalar(self.step as f64)));
        out
    }

    /// Restores moments written by [`Adam::state_tensors`].
    pub fn load_state(&mut self, set: &ParamSet, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |key: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::MissingParameter(key.to_string()))
        };
        for (k, (name, t)) in set.named_tensors().enumerate() {
            for (prefix, slot) in [
                ("adam/m/", &mut self.first[k]),
                ("adam/v/", &mut self.second[k]),
            ] {
                let saved = lookup(&format!("{prefix}{name}"))?;
                if saved.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_load_state",
                        lhs: t.shape().to_vec(),
                        rhs: saved.shape().to_vec(),
                    });
                }
                *slot = saved.data().to_vec();
            }
        }
        self.step = lookup("adam/step")?.item() as u64;
        Ok(())
    }
}

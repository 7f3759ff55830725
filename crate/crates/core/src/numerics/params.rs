use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug)]
struct Param {
    name: String,
    value: Tensor,
    kind: ParamKind,
}

/// Named, ordered collection of model tensors.
///
/// Model structs keep [`ParamId`]s into a set; the set itself is what gets
/// bound on a tape, optimized and checkpointed.
#[derive(Debug)]
pub struct ParamSet {
    uid: u64,
    params: Vec<Param>,
    frozen: bool,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        ParamSet {
            uid: next_uid(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    kind: p.kind,
                })
                .collect(),
            frozen: self.frozen,
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            uid: next_uid(),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn weight(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A frozen set binds as constants: no gradients reach its tensors.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen && self.params[id.0].kind == ParamKind::Weight
    }

    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Overwrites every parameter from `(name, tensor)` pairs; each name
    /// must exist with an identical shape, and every parameter must be given.
    pub fn load_named<'a>(
        &mut self,
        named: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in named {
            if let Some(id) = self.find(name) {
                self.set_value(id, t.clone())?;
                seen[id.0] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::MissingParameter(self.params[i].name.clone()));
        }
        Ok(())
    }

    /// Copies every tensor whose name starts with `prefix` in `other` into
    /// this set under `into_prefix`.
    pub fn copy_prefixed(
        &mut self,
        other: &ParamSet,
        prefix: &str,
        into_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.named_tensors() {
            if let Some(rest) = name.strip_prefix(prefix) {
                let target = format!("{into_prefix}{rest}");
                let id = self
                    .find(&target)
                    .ok_or_else(|| Error::MissingParameter(target.clone()))?;
                self.set_value(id, t.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Folds batch statistics recorded on `tape` into running averages:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn apply_batch_norm_updates(&mut self, tape: &Tape, momentum: f64) {
        for rec in tape.batch_norm_records() {
            if rec.set_uid != self.uid {
                continue;
            }
            for (id, batch) in [
                (rec.running_mean, &rec.batch_mean),
                (rec.running_var, &rec.batch_var),
            ] {
                let old = &self.params[id.0].value;
                let data = old
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
                    .collect();
                self.params[id.0].value = Tensor::from_parts(old.shape().to_vec(), data);
            }
        }
    }
}

/// Uniform Glorot/Xavier initialization for a tensor with the given fans.
pub fn glorot_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
    )
}

//! Parameterized building blocks shared by the SER and TTS networks.

use rand::Rng;

use super::params::{glorot_uniform, ParamId, ParamSet};
use super::tape::{BatchNormRecord, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Whether a forward pass trains (batch statistics, dropout) or infers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = set.weight(
            format!("{name}.weight"),
            glorot_uniform(&[in_dim, out_dim], in_dim, out_dim, rng),
        );
        let bias = bias.then(|| set.weight(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x·W + b` for an `M×in` input.
    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(set, self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(set, b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 2-D convolution layer over `C×H×W` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let fan_out = out_channels * kernel.0 * kernel.1;
        let kernel = set.weight(
            format!("{name}.kernel"),
            glorot_uniform(
                &[out_channels, in_channels, kernel.0, kernel.1],
                fan_in,
                fan_out,
                rng,
            ),
        );
        let bias = set.weight(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let k = tape.param(set, self.kernel)?;
        let b = tape.param(set, self.bias)?;
        tape.conv2d(x, k, Some(b), self.stride, self.padding)
    }
}

/// 1-D convolution over the rows of an `L×C` sequence, expressed as a
/// height-1 2-D convolution. Output length equals input length.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub inner: Conv2d,
}

impl Conv1d {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        debug_assert!(width % 2 == 1, "odd widths keep the sequence length");
        Conv1d {
            inner: Conv2d::new(
                set,
                name,
                in_channels,
                out_channels,
                (1, width),
                (1, 1),
                (0, width / 2),
                rng,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let (l, c) = match tape.shape(x) {
            [l, c] => (*l, *c),
            s => {
                return Err(Error::InvalidShape {
                    op: "conv1d",
                    msg: format!("expected L×C, got {s:?}"),
                })
            }
        };
        let xt = tape.transpose(x)?;
        let x3 = tape.reshape(xt, &[c, 1, l])?;
        let y = self.inner.forward(tape, set, x3)?;
        let k = tape.shape(y)[0];
        let y2 = tape.reshape(y, &[k, l])?;
        tape.transpose(y2)
    }
}

/// Batch normalization over the rows of an `M×C` matrix.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: set.weight(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: set.weight(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: set.buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: set.buffer(format!("{name}.running_var"), Tensor::ones(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var, phase: Phase) -> Result<Var> {
        let gamma = tape.param(set, self.gamma)?;
        let beta = tape.param(set, self.beta)?;
        match phase {
            Phase::Train => {
                let (y, batch_mean, batch_var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                tape.bn_records.push(BatchNormRecord {
                    set_uid: set.uid(),
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Phase::Infer => {
                let mean = set.value(self.running_mean);
                let var = set.value(self.running_var);
                let inv_std: Vec<f64> = var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                let mean = tape.constant(mean.clone())?;
                let inv_std = tape.constant(Tensor::from_vec(inv_std))?;
                let centered = tape.sub(x, mean)?;
                let normed = tape.mul(centered, inv_std)?;
                let scaled = tape.mul(normed, gamma)?;
                tape.add(scaled, beta)
            }
        }
    }
}

/// Weights of one LSTM direction. Gate blocks are ordered input, forget,
/// cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Running `(h, c)` of one LSTM cell, each `1×H`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_ih = set.weight(
            format!("{name}.w_ih"),
            glorot_uniform(&[input_dim, 4 * hidden], input_dim, hidden, rng),
        );
        let w_hh = set.weight(
            format!("{name}.w_hh"),
            glorot_uniform(&[hidden, 4 * hidden], hidden, hidden, rng),
        );
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = set.weight(format!("{name}.bias"), Tensor::from_vec(b));
        LstmParams {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Result<LstmState> {
        let z = tape.constant(Tensor::zeros(&[1, self.hidden]))?;
        Ok(LstmState { h: z, c: z })
    }

    /// One step given the already-projected input `x·W_ih` (`1×4H`).
    fn step_projected(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        xw: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let h = self.hidden;
        let w_hh = tape.param(set, self.w_hh)?;
        let bias = tape.param(set, self.bias)?;
        let hw = tape.matmul(state.h, w_hh)?;
        let z = tape.add(xw, hw)?;
        let z = tape.add(z, bias)?;
        let i = tape.slice(z, 1, 0, h)?;
        let f = tape.slice(z, 1, h, h)?;
        let g = tape.slice(z, 1, 2 * h, h)?;
        let o = tape.slice(z, 1, 3 * h, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Single cell application on a `1×d_in` input.
    pub fn cell(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let w_ih = tape.param(set, self.w_ih)?;
        let xw = tape.matmul(x, w_ih)?;
        self.step_projected(tape, set, xw, state)
    }

    /// Runs over the rows of a `T×d_in` sequence from a zero state and
    /// returns the `T×H` hidden states in input order.
    pub fn sequence(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        xs: Var,
        direction: Direction,
    ) -> Result<Var> {
        let shape = tape.shape(xs).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "lstm_sequence",
                lhs: vec![shape.first().copied().unwrap_or(0), self.input_dim],
                rhs: shape,
            });
        }
        let t_len = shape[0];
        let w_ih = tape.param(set, self.w_ih)?;
        let projected = tape.matmul(xs, w_ih)?;
        let mut state = self.zero_state(tape)?;
        let mut outs = vec![None; t_len];
        let order: Box<dyn Iterator<Item = usize>> = match direction {
            Direction::Forward => Box::new(0..t_len),
            Direction::Backward => Box::new((0..t_len).rev()),
        };
        for t in order {
            let xw = tape.row(projected, t)?;
            state = self.step_projected(tape, set, xw, state)?;
            outs[t] = Some(state.h);
        }
        let outs: Vec<Var> = outs
            .into_iter()
            .map(|o| o.expect("every step visited"))
            .collect();
        tape.concat(&outs, 0)
    }
}

/// Bidirectional LSTM; output rows concatenate forward and backward
/// hidden states (`T×2H`).
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstm {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        BiLstm {
            forward: LstmParams::new(set, &format!("{name}.fwd"), input_dim, hidden, rng),
            backward: LstmParams::new(set, &format!("{name}.bwd"), input_dim, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, xs: Var) -> Result<Var> {
        let f = self.forward.sequence(tape, set, xs, Direction::Forward)?;
        let b = self.backward.sequence(tape, set, xs, Direction::Backward)?;
        tape.concat(&[f, b], 1)
    }
}

/// Lookup table of `V×E` embeddings.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (3.0 / dim as f64).sqrt();
        let data = (0..vocab * dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Embedding {
            table: set.weight(
                format!("{name}.table"),
                Tensor::from_parts(vec![vocab, dim], data),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, ids: &[usize]) -> Result<Var> {
        let table = tape.param(set, self.table)?;
        tape.gather_rows(table, ids)
    }
}

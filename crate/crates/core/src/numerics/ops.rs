//! Differentiable forward operations recorded on a [`Tape`].

use rand::Rng;

use super::conv::{self, Conv2dGeometry};
use super::tape::{axis_split, dot, permute_map, sigmoid, softmax_row, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `b` may equal `a` in shape or match a trailing run of `a`'s extents.
fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl Tape {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        check_broadcast(name, av.shape(), bv.shape())?;
        let nb = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, bv.data()[k % nb]))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(name, value, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(name, value, op, rg)
    }

    /// `a + b`, with `b` broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::Offset(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..k {
                let s = av.data()[r * k + c];
                if s != 0.0 {
                    let brow = &bv.data()[c * n..(c + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, b)| *o += s * b);
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a.0, b.0),
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base;
        shape[axis] = extent;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let op = Op::Concat {
            inputs: inputs.iter().map(|v| v.0).collect(),
            axis,
        };
        self.push("concat", Tensor::from_parts(shape, data), op, rg)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, total_len, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total_len + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.requires_grad(a);
        self.push(
            "slice",
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            rg,
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, 0, i, 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let rg = self.requires_grad(a);
        self.push("reshape", value, Op::Reshape(a.0), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("permutation {perm:?} invalid for {shape:?}"),
            });
        }
        let map = permute_map(shape, perm);
        let data = map.iter().map(|&i| v.data()[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.requires_grad(a);
        self.push(
            "permute",
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                input: a.0,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", self.shape(a)),
            });
        }
        self.permute(a, &[1, 0])
    }

    /// Inverted dropout: kept units are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push("dropout", value, Op::Dropout { input: a.0, mask }, rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: format!("axis {axis} out of range for {:?}", v.shape()),
            });
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut data = vec![0.0; v.numel()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for s in 0..inner {
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = v.data()[(o * len + t) * inner + s];
                }
                for (t, p) in softmax_row(&buf).into_iter().enumerate() {
                    data[(o * len + t) * inner + s] = p;
                }
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push("softmax", value, Op::Softmax { input: a.0, axis }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.requires_grad(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`; the result drops that axis (a rank-1 input gives a
    /// one-element tensor).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {:?}", v.shape()),
            });
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                for s in 0..inner {
                    data[o * inner + s] += v.data()[(o * len + t) * inner + s];
                }
            }
        }
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.requires_grad(a);
        self.push(
            "sum_axis",
            Tensor::from_parts(shape, data),
            Op::SumAxis { input: a.0, axis },
            rg,
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Cross-correlation of a `C×H×W` input with `K×C×kh×kw` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = Conv2dGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![geom.out_channels],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out = conv::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(kernel)
            || bias.is_some_and(|b| self.requires_grad(b));
        let shape = vec![geom.out_channels, geom.out_h, geom.out_w];
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            rg,
        )
    }

    /// 2×2 max pooling with stride 2 over a `C×H×W` input. Odd extents are
    /// zero-padded on the right/bottom.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        if v.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                msg: format!("expected C×H×W, got {:?}", v.shape()),
            });
        }
        let (shape, data, source) = conv::maxpool2x2(v.shape(), v.data());
        let rg = self.requires_grad(input);
        self.push(
            "maxpool2d",
            Tensor::from_parts(shape, data),
            Op::MaxPool2d {
                input: input.0,
                source,
            },
            rg,
        )
    }

    /// Training-mode batch normalization of an `M×C` matrix over its rows.
    /// The batch statistics are returned alongside the output.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        if xv.rank() != 2
            || self.shape(gamma) != [xv.shape()[1]]
            || self.shape(beta) != [xv.shape()[1]]
        {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (m, c) = (xv.shape()[0], xv.shape()[1]);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|x| *x /= m as f64);
        for r in 0..m {
            for j in 0..c {
                let d = xv.data()[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|x| *x /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * c];
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            for j in 0..c {
                let h = (xv.data()[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let y = self.push(
            "batch_norm",
            Tensor::from_parts(vec![m, c], out),
            Op::BatchNorm {
                input: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((y, mean, var))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: vec![z.len()],
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&zi, &t)| zi.max(0.0) - zi * t + (-zi.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        let rg = self.requires_grad(logits);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `B×C` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = z.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / labels.len() as f64;
        let rg = self.requires_grad(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Rows of a `V×E` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("table {:?} with {} ids", t.shape(), ids.len()),
            });
        }
        let (v, e) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "row id {bad} out of range for {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.requires_grad(table);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), e], data),
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Zero rows appended so the first axis reaches `rows`.
    pub fn pad_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if rows < shape[0] {
            return Err(Error::InvalidShape {
                op: "pad_rows",
                msg: format!("cannot pad {} rows down to {rows}", shape[0]),
            });
        }
        if rows == shape[0] {
            return Ok(a);
        }
        let mut pad_shape = shape;
        pad_shape[0] = rows - pad_shape[0];
        let zeros = self.constant(Tensor::zeros(&pad_shape))?;
        self.concat(&[a, zeros], 0)
    }

    /// `1×n` row repeated `rows` times.
    pub fn repeat_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != 1 {
            return Err(Error::InvalidShape {
                op: "repeat_row",
                msg: format!("expected 1×n, got {shape:?}"),
            });
        }
        let ones = self.constant(Tensor::ones(&[rows, 1]))?;
        self.matmul(ones, a)
    }

    /// Dot product of two equal-length vectors as a one-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        debug_assert!(dot(av.data(), bv.data()).is_finite());
        let p = self.mul(a, b)?;
        self.sum(p)
    }
}

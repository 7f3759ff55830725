//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every forward operation appends a [`Node`] holding its value and the
//! information needed to push gradients back to its inputs. A tape lives for
//! one training step: build it, run the forward pass, call
//! [`Tape::backward`], read the parameter gradients, drop it.

use std::collections::HashMap;

use super::conv;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::dsp::deltas::{delta_transpose, regression_delta};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Sum(usize),
    SumAxis {
        input: usize,
        axis: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: conv::Conv2dGeometry,
    },
    MaxPool2d {
        input: usize,
        source: Vec<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    DeltaStack {
        input: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm, waiting to be
/// folded into the running averages of the owning [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BatchNormRecord {
    pub set_uid: u64,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<(u64, usize), Var>,
    pub(crate) bn_records: Vec<BatchNormRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that gradients are computed for.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push("variable", value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Leaf for a parameter of `set`, inserted once per tape and cached.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&(set.uid(), id.0)) {
            return Ok(v);
        }
        let trainable = set.is_trainable(id);
        let v = self.push("param", set.value(id).clone(), Op::Leaf, trainable)?;
        self.bound.insert((set.uid(), id.0), v);
        Ok(v)
    }

    /// Makes `var` stand in for parameter `id` of `set` on this tape.
    pub fn bind_param(&mut self, set: &ParamSet, id: ParamId, var: Var) -> Result<()> {
        let expected = set.value(id).shape();
        let got = self.shape(var);
        if expected != got {
            return Err(Error::ShapeMismatch {
                op: "bind_param",
                lhs: expected.to_vec(),
                rhs: got.to_vec(),
            });
        }
        self.bound.insert((set.uid(), id.0), var);
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients for every parameter of `set` bound on this tape, in
    /// parameter order. Unbound or frozen parameters yield `None`.
    pub fn param_grads(&self, set: &ParamSet) -> Vec<Option<Tensor>> {
        (0..set.len())
            .map(|i| {
                self.bound.get(&(set.uid(), i)).and_then(|&v| {
                    if self.requires_grad(v) {
                        self.grad(v)
                    } else {
                        None
                    }
                })
            })
            .collect()
    }

    pub fn batch_norm_records(&self) -> &[BatchNormRecord] {
        &self.bn_records
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients add into whatever earlier calls left behind, so two calls
    /// without [`Tape::zero_grad`] in between double every gradient. Nodes
    /// not on a path to `loss` keep their previous state.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {shape:?}"),
            });
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = local[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| reduce_broadcast(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (k, x) in g.iter().enumerate() {
                        gb[k % n] -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                let nb = bv.len();
                acc(*a, &mut |ga| {
                    for (k, x) in g.iter().enumerate() {
                        ga[k] += x * bv[k % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, x) in g.iter().enumerate() {
                        gb[k % nb] += x * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                let nb = bv.len();
                acc(*a, &mut |ga| {
                    for (k, x) in g.iter().enumerate() {
                        ga[k] += x / bv[k % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, x) in g.iter().enumerate() {
                        let d = bv[k % nb];
                        gb[k % nb] -= x * av[k] / (d * d);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(d, x)| *d += x * s);
            }),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MatMul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &mut |ga| {
                    // ga += g · bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &bv.data()[c * n..(c + 1) * n];
                            ga[r * k + c] += dot(grow, brow);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb += aᵀ · g
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let s = av.data()[r * k + c];
                            if s != 0.0 {
                                axpy(&mut gb[c * n..(c + 1) * n], s, grow);
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += x * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += x * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    if *y > 0.0 {
                        *d += x;
                    }
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += x * y;
                }
            }),
            Op::Log(a) => {
                let av = nodes[*a].value.data();
                acc(*a, &mut |ga| {
                    for ((d, x), v) in ga.iter_mut().zip(g).zip(av) {
                        *d += x / v;
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &j in inputs {
                    let chunk = nodes[j].value.shape()[*axis] * inner;
                    acc(j, &mut |gj| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gj[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = nodes[*input].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let total = in_shape[*axis] * inner;
                let chunk = out.shape()[*axis] * inner;
                acc(*input, &mut |gi| {
                    for o in 0..outer {
                        let dst =
                            &mut gi[o * total + start * inner..o * total + start * inner + chunk];
                        add_into(dst, &g[o * chunk..(o + 1) * chunk]);
                    }
                });
            }
            Op::Permute { input, perm } => {
                let in_shape = nodes[*input].value.shape();
                let map = permute_map(in_shape, perm);
                acc(*input, &mut |gi| {
                    for (k, &src) in map.iter().enumerate() {
                        gi[src] += g[k];
                    }
                });
            }
            Op::Dropout { input, mask } => acc(*input, &mut |gi| {
                for ((d, x), m) in gi.iter_mut().zip(g).zip(mask) {
                    *d += x * m;
                }
            }),
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                acc(*input, &mut |gi| {
                    for o in 0..outer {
                        for s in 0..inner {
                            let idx = |t: usize| (o * len + t) * inner + s;
                            let dotp: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..len {
                                gi[idx(t)] += y[idx(t)] * (g[idx(t)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis { input, axis } => {
                let in_shape = nodes[*input].value.shape();
                let (outer, len, inner) = axis_split(in_shape, *axis);
                acc(*input, &mut |gi| {
                    for o in 0..outer {
                        for t in 0..len {
                            for s in 0..inner {
                                gi[(o * len + t) * inner + s] += g[o * inner + s];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = nodes[*input].value.data();
                let w = nodes[*kernel].value.data();
                acc(*input, &mut |gx| conv::conv2d_grad_input(geom, w, g, gx));
                acc(*kernel, &mut |gw| conv::conv2d_grad_kernel(geom, x, g, gw));
                if let Some(b) = bias {
                    acc(*b, &mut |gb| conv::conv2d_grad_bias(geom, g, gb));
                }
            }
            Op::MaxPool2d { input, source } => acc(*input, &mut |gi| {
                for (k, &src) in source.iter().enumerate() {
                    if src != usize::MAX {
                        gi[src] += g[k];
                    }
                }
            }),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = nodes[*input].value.shape();
                let (m, c) = (shape[0], shape[1]);
                let gam = nodes[*gamma].value.data();
                acc(*gamma, &mut |gg| {
                    for r in 0..m {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..m {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                });
                acc(*input, &mut |gx| {
                    let mf = m as f64;
                    for j in 0..c {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for r in 0..m {
                            let gh = g[r * c + j] * gam[j];
                            sum_g += gh;
                            sum_gx += gh * xhat[r * c + j];
                        }
                        for r in 0..m {
                            let gh = g[r * c + j] * gam[j];
                            gx[r * c + j] +=
                                inv_std[j] / mf * (mf * gh - sum_g - xhat[r * c + j] * sum_gx);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = nodes[*logits].value.data();
                let n = z.len() as f64;
                acc(*logits, &mut |gz| {
                    for ((d, &zi), &t) in gz.iter_mut().zip(z).zip(targets) {
                        *d += g[0] * (sigmoid(zi) - t) / n;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let zt = &nodes[*logits].value;
                let (b, c) = (zt.shape()[0], zt.shape()[1]);
                acc(*logits, &mut |gz| {
                    for (r, &label) in labels.iter().enumerate() {
                        let p = softmax_row(&zt.data()[r * c..(r + 1) * c]);
                        for (j, pj) in p.iter().enumerate() {
                            let target = if j == label { 1.0 } else { 0.0 };
                            gz[r * c + j] += g[0] * (pj - target) / b as f64;
                        }
                    }
                });
            }
            Op::DeltaStack { input } => {
                let shape = nodes[*input].value.shape();
                let (t, n) = (shape[0], shape[1]);
                let plane = t * n;
                acc(*input, &mut |gi| {
                    add_into(gi, &g[..plane]);
                    let d1 = delta_transpose(&g[plane..2 * plane], t, n);
                    add_into(gi, &d1);
                    let d2 = delta_transpose(&delta_transpose(&g[2 * plane..], t, n), t, n);
                    add_into(gi, &d2);
                });
            }
            Op::Gather { table, ids } => {
                let e = nodes[*table].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                });
            }
        }
    }

    /// Stacks a `T×N` matrix with its first and second regression deltas
    /// into a `3×T×N` tensor (channels first).
    pub fn delta_stack(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "delta_stack",
                msg: format!("expected T×N, got {:?}", v.shape()),
            });
        }
        let (t, n) = (v.shape()[0], v.shape()[1]);
        let d1 = regression_delta(v.data(), t, n);
        let d2 = regression_delta(&d1, t, n);
        let mut data = Vec::with_capacity(3 * t * n);
        data.extend_from_slice(v.data());
        data.extend_from_slice(&d1);
        data.extend_from_slice(&d2);
        let rg = self.requires_grad(a);
        self.push(
            "delta_stack",
            Tensor::from_parts(vec![3, t, n], data),
            Op::DeltaStack { input: a.0 },
            rg,
        )
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn reduce_broadcast(gb: &mut [f64], g: &[f64]) {
    let n = gb.len();
    for (k, x) in g.iter().enumerate() {
        gb[k % n] += x;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each output position of a permutation, the flat source index.
pub(crate) fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

//! Direct-loop convolution and pooling kernels shared by the tape ops.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct Conv2dGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || input[0] != kernel[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (k, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        let span_h = h + 2 * pad.0;
        let span_w = w + 2 * pad.1;
        if kh > span_h || kw > span_w {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}×{kw} larger than padded input {span_h}×{span_w}, output extent would be non-positive"
                ),
            });
        }
        Ok(Conv2dGeometry {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: k,
            kh,
            kw,
            stride,
            pad,
            out_h: (span_h - kh) / stride.0 + 1,
            out_w: (span_w - kw) / stride.1 + 1,
        })
    }

    /// Input row touched by output row `oy` at kernel tap `ky`, if in bounds.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride.0 + ky)
            .checked_sub(self.pad.0)
            .filter(|&r| r < self.in_h)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride.1 + kx)
            .checked_sub(self.pad.1)
            .filter(|&c| c < self.in_w)
    }

    /// Output columns whose input column at tap `kx` is in bounds.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = (0..self.out_w).find(|&ox| self.in_col(ox, kx).is_some());
        match lo {
            None => 0..0,
            Some(lo) => {
                let hi = (lo..self.out_w)
                    .rev()
                    .find(|&ox| self.in_col(ox, kx).is_some())
                    .map_or(lo, |h| h + 1);
                lo..hi
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &Conv2dGeometry,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_channels * plane];
    for o in 0..g.out_channels {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            oplane.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..g.in_channels {
            let xplane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((o * g.in_channels + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = g.valid_cols(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let xrow = &xplane[iy * g.in_w..(iy + 1) * g.in_w];
                        let orow = &mut oplane[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in cols.clone() {
                            let ix = ox * g.stride.1 + kx - g.pad.1;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input(g: &Conv2dGeometry, w: &[f64], gout: &[f64], gx: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    for o in 0..g.out_channels {
        let gplane = &gout[o * plane..(o + 1) * plane];
        for c in 0..g.in_channels {
            let xplane = &mut gx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((o * g.in_channels + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = g.valid_cols(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &gplane[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in cols.clone() {
                            let ix = ox * g.stride.1 + kx - g.pad.1;
                            xplane[iy * g.in_w + ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_kernel(g: &Conv2dGeometry, x: &[f64], gout: &[f64], gw: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    for o in 0..g.out_channels {
        let gplane = &gout[o * plane..(o + 1) * plane];
        for c in 0..g.in_channels {
            let xplane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let cols = g.valid_cols(kx);
                    let mut acc = 0.0;
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &gplane[oy * g.out_w..(oy + 1) * g.out_w];
                        let xrow = &xplane[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in cols.clone() {
                            acc += grow[ox] * xrow[ox * g.stride.1 + kx - g.pad.1];
                        }
                    }
                    gw[((o * g.in_channels + c) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_bias(g: &Conv2dGeometry, gout: &[f64], gb: &mut [f64]) {
    let plane = g.out_h * g.out_w;
    for (o, b) in gb.iter_mut().enumerate() {
        *b += gout[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
}

/// 2×2/stride-2 max pooling of a `C×H×W` array. Returns the output shape,
/// values, and for each output the flat input index it came from
/// (`usize::MAX` when a zero-padding cell won). Ties go to the first cell
/// in row-major order.
pub(crate) fn maxpool2x2(shape: &[usize], x: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut src = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                        let (v, idx) = if iy < h && ix < w {
                            let idx = (ch * h + iy) * w + ix;
                            (x[idx], idx)
                        } else {
                            (0.0, usize::MAX)
                        };
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                src.push(best_idx);
            }
        }
    }
    (vec![c, oh, ow], out, src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_difference_check;
    use crate::numerics::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 3])).unwrap();
        let k = t.constant(random(&[2, 1, 2, 2], &mut rng)).unwrap();
        let b = t.constant(Tensor::zeros(&[2])).unwrap();
        let y = t.conv2d(x, k, Some(b), (1, 1), (0, 0)).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 2]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_tap_identity_kernel() {
        let mut t = Tape::new();
        let input = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 3.5]).unwrap();
        let x = t.constant(input.clone()).unwrap();
        let k = t.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let y = t.conv2d(x, k, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(t.value(y), &input);
    }

    #[test]
    fn output_extent_formula_and_errors() {
        let g = Conv2dGeometry::new(&[3, 240, 40], &[8, 3, 5, 3], (2, 1), (2, 1)).unwrap();
        assert_eq!((g.out_h, g.out_w), ((240 + 4 - 5) / 2 + 1, 40));
        assert!(Conv2dGeometry::new(&[1, 2, 2], &[1, 1, 3, 3], (1, 1), (0, 0)).is_err());
        assert!(Conv2dGeometry::new(&[2, 4, 4], &[1, 1, 3, 3], (1, 1), (0, 0)).is_err());
    }

    /// Literal quadruple loop, independent of the kernel above.
    fn brute_conv(x: &Tensor, k: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ko, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = vec![];
        for o in 0..ko {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[((1, 1), (0, 0)), ((2, 1), (2, 1)), ((2, 2), (1, 0))] {
            let x = random(&[2, 7, 5], &mut rng);
            let k = random(&[3, 2, 5, 3], &mut rng);
            let mut t = Tape::new();
            let xv = t.constant(x.clone()).unwrap();
            let kv = t.constant(k.clone()).unwrap();
            let y = t.conv2d(xv, kv, None, stride, pad).unwrap();
            let expected = brute_conv(&x, &k, stride, pad);
            for (a, b) in t.value(y).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 4, 4], &mut rng);
        let k = random(&[1, 1, 2, 2], &mut rng);
        let w = random(&[1, 3, 3], &mut rng);
        let loss = |t: &mut Tape, y| {
            let wv = t.constant(w.clone())?;
            let p = t.mul(y, wv)?;
            t.sum(p)
        };
        let kc = k.clone();
        let err_x = finite_difference_check(
            &|t: &mut Tape, xv| {
                let kv = t.constant(kc.clone())?;
                let y = t.conv2d(xv, kv, None, (1, 1), (0, 0))?;
                loss(t, y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let err_k = finite_difference_check(
            &|t: &mut Tape, kv| {
                let xv = t.constant(x.clone())?;
                let y = t.conv2d(xv, kv, None, (1, 1), (0, 0))?;
                loss(t, y)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err_x < 1e-4 && err_k < 1e-4, "{err_x} {err_k}");

        // strided, padded, multi-channel with bias
        let x = random(&[2, 6, 5], &mut rng);
        let k = random(&[3, 2, 5, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let f = |t: &mut Tape, xv, kv, bv| {
            let y = t.conv2d(xv, kv, Some(bv), (2, 1), (2, 1))?;
            let y = t.tanh(y)?;
            t.sum(y)
        };
        let (k1, b1) = (k.clone(), b.clone());
        let e1 = finite_difference_check(
            &|t: &mut Tape, xv| {
                let kv = t.constant(k1.clone())?;
                let bv = t.constant(b1.clone())?;
                f(t, xv, kv, bv)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let (x2, b2) = (x.clone(), b.clone());
        let e2 = finite_difference_check(
            &|t: &mut Tape, kv| {
                let xv = t.constant(x2.clone())?;
                let bv = t.constant(b2.clone())?;
                f(t, xv, kv, bv)
            },
            &k,
            1e-5,
        )
        .unwrap();
        let e3 = finite_difference_check(
            &|t: &mut Tape, bv| {
                let xv = t.constant(x.clone())?;
                let kv = t.constant(k.clone())?;
                f(t, xv, kv, bv)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(e1 < 1e-4 && e2 < 1e-4 && e3 < 1e-4, "{e1} {e2} {e3}");
    }

    #[test]
    fn maxpool_basic_and_tie_rule() {
        let mut t = Tape::new();
        let x = t
            .variable(Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        let y = t.maxpool2d(x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);

        let x = t.variable(Tensor::full(&[1, 2, 2], 0.7)).unwrap();
        let y = t.maxpool2d(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_brute_force_and_pads_odd_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 4, 4], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let y = t.maxpool2d(xv).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[(c * 4 + 2 * oy + dy) * 4 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(t.value(y).data()[(c * 2 + oy) * 2 + ox], m);
                }
            }
        }
        let odd = t.constant(Tensor::full(&[1, 3, 3], -1.0)).unwrap();
        let y = t.maxpool2d(odd).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2]);
        // padded cells hold zero, which beats the negative inputs
        assert_eq!(t.value(y).data(), &[-1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[2, 4, 6], &mut rng);
        let err = finite_difference_check(
            &|t: &mut Tape, xv| {
                let y = t.maxpool2d(xv)?;
                let y = t.square(y)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

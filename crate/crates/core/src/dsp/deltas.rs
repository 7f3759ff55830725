//! Regression deltas with a ±2 frame window and replicated edges.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Half-width of the regression window.
pub const DELTA_WINDOW: usize = 2;

fn delta_norm() -> f64 {
    2.0 * (1..=DELTA_WINDOW).map(|k| (k * k) as f64).sum::<f64>()
}

/// `Δc_t = Σ_k k·(c_{t+k} − c_{t−k}) / (2·Σ_k k²)` over the rows of a
/// row-major `t×n` matrix, clamping frame indices at the edges.
pub fn regression_delta(x: &[f64], t: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), t * n);
    let norm = delta_norm();
    let last = t as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    let mut out = vec![0.0; t * n];
    for frame in 0..t {
        let row = &mut out[frame * n..(frame + 1) * n];
        for k in 1..=DELTA_WINDOW {
            let ahead = clamp(frame as isize + k as isize);
            let behind = clamp(frame as isize - k as isize);
            let w = k as f64 / norm;
            for j in 0..n {
                row[j] += w * (x[ahead * n + j] - x[behind * n + j]);
            }
        }
    }
    out
}

/// Adjoint of [`regression_delta`]: maps a gradient with respect to the
/// deltas back onto the input frames.
pub fn delta_transpose(g: &[f64], t: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(g.len(), t * n);
    let norm = delta_norm();
    let last = t as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    let mut out = vec![0.0; t * n];
    for frame in 0..t {
        for k in 1..=DELTA_WINDOW {
            let ahead = clamp(frame as isize + k as isize);
            let behind = clamp(frame as isize - k as isize);
            let w = k as f64 / norm;
            for j in 0..n {
                let gv = w * g[frame * n + j];
                out[ahead * n + j] += gv;
                out[behind * n + j] -= gv;
            }
        }
    }
    out
}

/// Stacks a `T×N` feature matrix with its Δ and ΔΔ into `3×T×N`
/// (static, Δ, ΔΔ as leading channels).
pub fn delta_stack(frames: &Tensor) -> Result<Tensor> {
    if frames.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "deltas",
            msg: format!("expected T×N, got {:?}", frames.shape()),
        });
    }
    let (t, n) = (frames.shape()[0], frames.shape()[1]);
    let d1 = regression_delta(frames.data(), t, n);
    let d2 = regression_delta(&d1, t, n);
    let mut data = Vec::with_capacity(3 * t * n);
    data.extend_from_slice(frames.data());
    data.extend_from_slice(&d1);
    data.extend_from_slice(&d2);
    Tensor::new(vec![3, t, n], data)
}

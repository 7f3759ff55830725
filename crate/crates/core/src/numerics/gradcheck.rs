//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn evaluate(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone())?;
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::InvalidShape {
            op: "finite_difference_check",
            msg: format!("function must be scalar-valued, got {:?}", tape.shape(y)),
        });
    }
    Ok(tape.item(y))
}

/// Compares the autodiff gradient of scalar `f` at `x` with central
/// differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` on every coordinate.
pub fn gradient_check(
    f: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let base = evaluate(f, x)?;
    if evaluate(f, x)?.to_bits() != base.to_bits() {
        return Err(Error::invalid(
            "finite_difference_check: function is not deterministic",
        ));
    }

    let mut tape = Tape::new();
    let xv = tape.variable(x.clone())?;
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let grad = tape
        .grad(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fp = evaluate(f, &Tensor::from_parts(x.shape().to_vec(), plus))?;
        let fm = evaluate(f, &Tensor::from_parts(x.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * eps);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

/// Maximum relative error over all coordinates of `x`.
pub fn finite_difference_check(
    f: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    gradient_check(f, x, eps, None).map(|r| r.max_relative_error)
}

/// `count` coordinates spread evenly over `0..n`.
pub fn spread_coords(n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..count)
        .map(|k| k * n / count + (k * 7) % (n / count).max(1))
        .collect();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn squared_norm_is_exact() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0, 3.0]);
        let err = finite_difference_check(
            &|t: &mut Tape, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_nondeterminism() {
        let counter = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let f = |t: &mut Tape, x: Var| {
            counter.set(counter.get() + 1.0);
            t.add_scalar(x, counter.get())
        };
        assert!(finite_difference_check(&f, &x, 1e-5).is_err());
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::zeros(&[3]);
        assert!(finite_difference_check(&|t: &mut Tape, x| t.tanh(x), &x, 1e-5).is_err());
    }

    #[test]
    fn reports_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative the central
        // difference splits in half.
        let x = Tensor::zeros(&[1]);
        let err = finite_difference_check(
            &|t: &mut Tape, x| {
                let y = t.relu(x)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn spread_coords_stays_in_range() {
        let c = spread_coords(1000, 20);
        assert!(c.len() <= 20 && c.iter().all(|&i| i < 1000));
        assert_eq!(spread_coords(5, 20), vec![0, 1, 2, 3, 4]);
    }
}

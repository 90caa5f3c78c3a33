//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric gradients coordinate by coordinate.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate at which the maximum was attained.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Builds `f(x)` on a fresh tape, differentiates it, and compares every
/// coordinate of the gradient against `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(input, false);
        let out = f(&tape, v)?;
        let value = tape.item(out);
        if value.is_nan() {
            return Err(Error::Numeric("function returned NaN".into()));
        }
        Ok(value)
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract("gradient check needs a scalar-valued function"));
    }
    if tape.item(out).is_nan() {
        return Err(Error::Numeric("function returned NaN".into()));
    }
    tape.backward(out)?;
    let analytic = match tape.grad(v) {
        Some(g) => g.to_f64_vec(),
        None => vec![0.0; x.len()],
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

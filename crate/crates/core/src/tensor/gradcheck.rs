//! Central finite-difference verification of backward passes.
//!
//! The analytic gradient comes from `backward()` in the tensor's own element
//! type. The numeric reference re-evaluates the same function in `f64`, where
//! the rounding noise of `(f(x+eps) - f(x-eps)) / 2eps` is far below the
//! tolerances used for `f32` model math.

use super::{Element, Tensor};
use crate::{Error, Result};

/// A scalar-valued function that can be evaluated at any precision.
pub trait ScalarFunction {
    fn eval<E: Element>(&self, x: &Tensor<E>) -> Result<Tensor<E>>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Index (into the checked coordinates) of the largest relative error.
    pub worst: usize,
    pub checked: usize,
}

impl GradCheckReport {
    /// Folds `(analytic, numeric)` pairs into a report.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut report = Self::default();
        for (i, (a, n)) in pairs.into_iter().enumerate() {
            let rel = relative_error(a, n);
            if rel > report.max_relative_error || report.checked == 0 {
                report.max_relative_error = rel;
                report.worst = i;
            }
            report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
            report.checked += 1;
        }
        report
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both are zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn scalar_value<E: Element>(t: &Tensor<E>) -> Result<f64> {
    t.item().map(|v| v.as_f64()).map_err(|_| {
        Error::shape(format!(
            "finite_diff_check: function must return a scalar, got {:?}",
            t.shape()
        ))
    })
}

/// Checks `f`'s backward pass at `point` on every coordinate.
pub fn finite_diff_check<E, F>(f: &F, point: &Tensor<E>, eps: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: ScalarFunction,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    finite_diff_check_at(f, point, eps, &all)
}

/// Checks `f`'s backward pass at `point` on the listed coordinates only.
pub fn finite_diff_check_at<E, F>(
    f: &F,
    point: &Tensor<E>,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    E: Element,
    F: ScalarFunction,
{
    if eps <= 0.0 {
        return Err(Error::arg("finite_diff_check: eps must be positive"));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= point.numel()) {
        return Err(Error::arg(format!(
            "finite_diff_check: coordinate {bad} out of range for {} elements",
            point.numel()
        )));
    }
    let x = point.with_requires_grad(true);
    let y = f.eval(&x)?;
    scalar_value(&y)?;
    y.backward()?;
    let analytic = x
        .grad()
        .unwrap_or_else(|| vec![E::zero(); point.numel()]);

    let base: Vec<f64> = point.data().iter().map(|v| v.as_f64()).collect();
    let mut pairs = Vec::with_capacity(coords.len());
    for &c in coords {
        let at = |delta: f64| -> Result<f64> {
            let mut data = base.clone();
            data[c] += delta;
            let shifted = Tensor::new(data, point.shape())?;
            scalar_value(&f.eval(&shifted)?)
        };
        let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
        pairs.push((analytic[c].as_f64(), numeric));
    }
    Ok(GradCheckReport::from_pairs(pairs))
}

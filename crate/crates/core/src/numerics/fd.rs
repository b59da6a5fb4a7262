//! Central finite differences, the independent check on the tape.

use crate::error::{invalid, numeric, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient, one coordinate at a time.
pub fn finite_diff_grad<F>(loss_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = loss_fn(&x)?;
        x[i] = x0 - h;
        let fm = loss_fn(&x)?;
        x[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(numeric(format!("non-finite loss while probing coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y, floor))
        .fold(0.0, f64::max)
}

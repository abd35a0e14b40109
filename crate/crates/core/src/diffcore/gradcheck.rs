//! Central finite differences for checking analytic gradients.

use super::ParamSet;
use crate::error::Result;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of `params`,
/// in flat insertion order.
pub fn central_differences<F>(params: &ParamSet, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let base = params.flat_values();
    let mut probe = params.clone();
    let mut point = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        point[i] = base[i] + h;
        probe.set_flat_values(&point)?;
        let plus = f(&probe)?;
        point[i] = base[i] - h;
        probe.set_flat_values(&point)?;
        let minus = f(&probe)?;
        point[i] = base[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero components
/// from turning round-off into huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest component-wise [`relative_error`].
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b, floor))
        .fold(0.0, f64::max)
}

//! Error metrics against a reference image.

use crate::error::{check_len, Error, Result};
use crate::image::Image;

fn sum_sq(f: &[f64]) -> Result<f64> {
    let s: f64 = f.iter().map(|v| v * v).sum();
    if !(s > 0.0) {
        return Err(Error::Degenerate("reference image has zero energy".into()));
    }
    Ok(s)
}

/// Relative squared error `sum (x - f)^2 / sum f^2`.
pub fn mse(x: &[f64], f: &[f64]) -> Result<f64> {
    check_len("mse", f.len(), x.len())?;
    let den = sum_sq(f)?;
    Ok(x.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / den)
}

/// Signed relative total bias `sum (x_bar - f) / sum f`.
pub fn bias(x_bar: &[f64], f: &[f64]) -> Result<f64> {
    check_len("bias", f.len(), x_bar.len())?;
    let den: f64 = f.iter().sum();
    if den == 0.0 {
        return Err(Error::Degenerate("reference image sums to zero".into()));
    }
    Ok(x_bar.iter().zip(f).map(|(a, b)| a - b).sum::<f64>() / den)
}

/// Pixelwise mean of the ensemble.
pub fn ensemble_mean(ensemble: &[&[f64]]) -> Result<Vec<f64>> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty ensemble".into()))?;
    let mut mean = vec![0.0; first.len()];
    for x in ensemble {
        check_len("ensemble_mean", first.len(), x.len())?;
        mean.iter_mut().zip(x.iter()).for_each(|(m, v)| *m += v);
    }
    let o = ensemble.len() as f64;
    mean.iter_mut().for_each(|m| *m /= o);
    Ok(mean)
}

/// `(1/O) sum_i sum_j (x_j^i - mean_i x_j^i)^2 / sum_j f_j^2`.
pub fn variance(ensemble: &[&[f64]], f: &[f64]) -> Result<f64> {
    let mean = ensemble_mean(ensemble)?;
    check_len("variance", f.len(), mean.len())?;
    let den = sum_sq(f)?;
    let total: f64 = ensemble
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    Ok(total / ensemble.len() as f64 / den)
}

/// Mean MSE over realizations at each recorded iteration.
///
/// `traces[i][k]` is realization `i`'s image at record point `k`; all traces
/// must share the iteration list.
pub fn amse_curve(iterations: &[usize], traces: &[Vec<Vec<f64>>], f: &[f64]) -> Result<Vec<(usize, f64)>> {
    if traces.is_empty() {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    let mut curve = Vec::with_capacity(iterations.len());
    for (k, &it) in iterations.iter().enumerate() {
        let mut acc = 0.0;
        for t in traces {
            check_len("amse_curve", iterations.len(), t.len())?;
            acc += mse(&t[k], f)?;
        }
        curve.push((it, acc / traces.len() as f64));
    }
    Ok(curve)
}

/// Minimum of a curve and the iteration where it occurs (earliest on ties).
pub fn curve_minimum(curve: &[(usize, f64)]) -> Option<(usize, f64)> {
    curve.iter().copied().fold(None, |best, (it, v)| match best {
        Some((_, bv)) if bv <= v => best,
        _ => Some((it, v)),
    })
}

/// Pixel values of one row, in column order.
pub fn line_profile(x: &Image, row: usize) -> Result<Vec<f64>> {
    if row >= x.height() {
        return Err(Error::InvalidParameter(format!(
            "row {row} outside an image of height {}",
            x.height()
        )));
    }
    Ok((0..x.width()).map(|c| x.at(row, c)).collect())
}

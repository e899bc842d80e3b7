//! Numerically stable probability primitives.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-sum-exp of a slice; `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place softmax of one row with max subtraction. `-inf` entries map to exactly 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return;
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Row-wise softmax of `m / temperature`.
pub fn softmax_rows(m: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = m.scale(1.0 / temperature);
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Checks that `p` is a probability vector within `tol`.
pub fn validate_distribution(p: &[f64], tol: f64) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("invalid probability entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::Validation(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// Shannon entropy in nats with `0 log 0 = 0`, no validation.
pub fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Shannon entropy in nats of a validated probability vector.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_distribution(p, 1e-9)?;
    Ok(entropy_unchecked(p).max(0.0))
}

/// `log N(u | mean, sigma² I)`.
pub fn log_gaussian_isotropic(u: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if u.len() != mean.len() {
        return Err(Error::Dimension(format!(
            "u has {} entries, mean has {}",
            u.len(),
            mean.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let d = u.len() as f64;
    let sq: f64 = u.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * (LN_2PI + 2.0 * sigma.ln()) - sq / (2.0 * sigma * sigma))
}

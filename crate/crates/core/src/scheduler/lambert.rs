//! Principal branch of the Lambert W function.

use crate::error::{Error, Result};

const INV_E: f64 = 1.0 / std::f64::consts::E;
const MAX_ITER: usize = 50;

/// W0(x): the `w >= -1` solving `w e^w = x`, for `x >= -1/e`.
///
/// Halley iteration from a branch-point series (near `-1/e`), a log-based
/// guess for large `x`, and `ln(1+x)` in between.
pub fn lambert_w0(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::LambertDomain(x));
    }
    let dist = x + INV_E;
    if dist < 0.0 {
        // Tolerate -1/e rounded one ulp low.
        if dist > -4.0 * f64::EPSILON * INV_E {
            return Ok(-1.0);
        }
        return Err(Error::LambertDomain(x));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }

    let mut w = if x < -0.25 {
        let p = (2.0 * std::f64::consts::E * dist).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else if x < 3.0 {
        let l = x.ln_1p();
        l * (1.0 - (1.0 + l).ln() / (2.0 + l))
    } else {
        let l1 = x.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };
    if w <= -1.0 {
        return Ok(-1.0);
    }

    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1.abs() < 1e-300 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        let next = (w - step).max(-1.0);
        let done = (next - w).abs() <= 4.0 * f64::EPSILON * (1.0 + next.abs());
        w = next;
        if done {
            break;
        }
    }
    Ok(w)
}

use super::{NumericsError, Result};

/// Absolute differences at or below this count as agreement.
pub const ABS_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the worst error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient returned by `f` at `point` with central
/// differences of its value, coordinate by coordinate.
///
/// `f` maps a point to `(value, gradient)`. The per-coordinate error is
/// `|a - n| / max(|a|, |n|)`, taken as zero when `|a - n| <= 1e-8`.
pub fn grad_check<F>(mut f: F, point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(NumericsError::Step(step));
    }
    let (value, analytic) = f(point);
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFinite("grad_check"));
    }
    if analytic.len() != point.len() {
        return Err(NumericsError::Shape {
            op: "grad_check",
            detail: format!("gradient has {} entries for {} coordinates", analytic.len(), point.len()),
        });
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x).0;
        x[i] = orig - step;
        let minus = f(&x).0;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite("grad_check"));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let diff = (a - numeric).abs();
        let err = if diff <= ABS_ERROR_FLOOR {
            0.0
        } else {
            diff / a.abs().max(numeric.abs())
        };
        if err > report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

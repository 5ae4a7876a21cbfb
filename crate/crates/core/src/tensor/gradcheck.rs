//! Central finite-difference checks for analytic gradients.

use super::NumArray;

/// Outcome of comparing one analytic gradient with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, 0 when both vanish.
    pub rel_error: f64,
    pub passed: bool,
}

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient(x: &NumArray, h: f64, mut f: impl FnMut(&NumArray) -> f64) -> NumArray {
    let mut probe = x.clone();
    let mut out = NumArray::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    out
}

pub fn relative_error(analytic: &NumArray, numeric: &NumArray) -> f64 {
    let mut diff = analytic.clone();
    diff.add_scaled(-1.0, numeric);
    let scale = analytic.norm().max(numeric.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff.norm() / scale
    }
}

pub fn compare(name: &str, analytic: &NumArray, numeric: &NumArray, tol: f64) -> CheckResult {
    let rel_error = if analytic.shape() == numeric.shape() {
        relative_error(analytic, numeric)
    } else {
        f64::INFINITY
    };
    CheckResult {
        name: name.to_owned(),
        rel_error,
        passed: rel_error < tol,
    }
}

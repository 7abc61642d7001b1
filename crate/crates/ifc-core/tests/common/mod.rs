//! Shared helpers for the acceptance tests.

/// Central difference of a scalar function along one coordinate.
pub fn fd_scalar(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += h;
    let mut minus = x.to_vec();
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn check_rel_err(analytic: f64, fd: f64, tol: f64, what: &str) {
    // Central differences bottom out around eps * |f| / h; when both sides
    // sit below that noise floor the coordinate's gradient is zero for all
    // practical purposes (e.g. key biases, which softmax cancels exactly).
    if analytic.abs() < 1e-8 && fd.abs() < 1e-8 {
        return;
    }
    let rel = (analytic - fd).abs() / (analytic.abs() + 1e-8);
    assert!(
        rel < tol,
        "{what}: analytic {analytic} vs finite difference {fd} (rel {rel})"
    );
}

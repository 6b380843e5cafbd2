/// Central-difference gradient of a scalar function.
pub fn finite_difference<F>(f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Floor of the relative-error denominator, so components whose true gradient
/// is (near) zero are judged by their absolute error instead. In
/// [`gradient_check`] it is scaled by `max(1, |f|)` because central-difference
/// roundoff grows with the function value.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric gradient component.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, GRAD_CHECK_FLOOR)
}

fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient returned by `f` at `params` against central
/// differences with step `eps` and returns the worst relative error.
///
/// `eps` is clamped into `[1e-7, 1e-3]`.
pub fn gradient_check<F>(f: F, params: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let eps = eps.clamp(1e-7, 1e-3);
    let (value, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let numeric = finite_difference(|p| f(p).0, params, eps);
    let floor = GRAD_CHECK_FLOOR * value.abs().max(1.0);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error_with_floor(*a, *n, floor))
        .fold(0.0, f64::max)
}

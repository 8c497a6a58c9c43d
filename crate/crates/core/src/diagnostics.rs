//! Numerical verification helpers used by the test suites.

/// Central finite-difference gradient of a scalar function of a flat vector.
pub fn central_difference_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = f(&work);
        work[i] = orig - step;
        let down = f(&work);
        work[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Relative error with an absolute floor, for comparing gradients.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

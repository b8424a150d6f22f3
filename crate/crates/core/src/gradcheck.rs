//! Central finite differences, used to audit tape gradients.
//!
//! Nothing here touches the tape: the oracle only evaluates the scalar
//! function it is given.

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Gradients whose magnitude is below this floor are compared absolutely.
/// Central differences at step 1e-6 carry roughly 1e-10 of rounding noise
/// for O(1) losses, so relative error is only meaningful above it.
pub const REL_FLOOR: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest [`relative_error`] over paired buffers.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = central_difference(&[2.0, -1.0], FD_STEP, |x| x[0].powi(3) + 5.0 * x[1]);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0, 1e-5), 0.0);
        assert!((relative_error(1e-12, 2e-12, 1e-5) - 1e-7).abs() < 1e-15);
        assert!((relative_error(1.0, 1.1, 1e-5) - 0.1 / 1.1).abs() < 1e-12);
    }
}

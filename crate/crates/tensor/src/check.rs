//! Finite-difference gradient oracle.
//!
//! Independent of the tape's backward pass: it only re-evaluates a
//! scalar-valued forward function under central perturbations. Valid
//! only away from nonlinearity kinks; see [`Tape::min_kink_distance`]
//! for the guard used by the test suites.
//!
//! [`Tape::min_kink_distance`]: crate::Tape::min_kink_distance

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradient vectors.
///
/// The denominator is floored at 1e-4 so that agreement in the
/// finite-difference noise floor is not penalised.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

//! Central finite-difference helpers used by the gradient-fidelity checks.

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], index: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[index] = x[index] + h;
    let plus = f(&probe);
    probe[index] = x[index] - h;
    let minus = f(&probe);
    (plus - minus) / (2.0 * h)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero gradient pairs from reporting spurious
/// relative blow-ups; it sits well below any gradient magnitude that matters.
pub fn relative_error(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

//! Extrapolation of s-dependent quantities to s → ∞.

use num_complex::Complex64;

/// Least-squares fit y(s) ≈ a + c/s; returns a. A single sample is returned unchanged.
pub fn richardson_inverse_s(s: &[f64], y: &[Complex64]) -> Complex64 {
    assert_eq!(s.len(), y.len());
    match s.len() {
        0 => Complex64::default(),
        1 => y[0],
        n => {
            let x: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
            let mx = x.iter().sum::<f64>() / n as f64;
            let my = y.iter().sum::<Complex64>() / n as f64;
            let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
            let sxy: Complex64 = x.iter().zip(y).map(|(a, b)| (b - my) * (a - mx)).sum();
            let slope = sxy / sxx;
            my - slope * mx
        }
    }
}

/// True when the extrapolated value lies farther from every ladder value than half the spread
/// of the ladder (plus an absolute floor `atol`).
pub fn outside_hull(values: &[Complex64], extrapolated: Complex64, atol: f64) -> bool {
    if values.len() < 2 {
        return false;
    }
    let mut spread: f64 = 0.0;
    for a in values {
        for b in values {
            spread = spread.max((a - b).norm());
        }
    }
    let dist = values
        .iter()
        .map(|v| (v - extrapolated).norm())
        .fold(f64::INFINITY, f64::min);
    dist > 0.5 * spread + atol
}

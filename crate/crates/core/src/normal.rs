//! Gaussian distribution helpers with tail-accurate CDFs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// P(Z <= z).
pub fn cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// P(Z > z).
pub fn sf(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

/// P(a <= Z < b), computed on the side of the distribution that avoids
/// cancellation.
pub fn interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        (sf(a) - sf(b)).max(0.0)
    } else if b <= 0.0 {
        (cdf(b) - cdf(a)).max(0.0)
    } else {
        (1.0 - cdf(a) - sf(b)).max(0.0)
    }
}

/// `int_a^b (u + d)^2 phi(u) du` for the standard normal density.
pub fn interval_second_moment(a: f64, b: f64, d: f64) -> f64 {
    let mass = interval(a, b);
    let tail = |x: f64| if x.is_finite() { x * pdf(x) } else { 0.0 };
    let dens = |x: f64| if x.is_finite() { pdf(x) } else { 0.0 };
    let u2 = mass + tail(a) - tail(b);
    let u1 = dens(a) - dens(b);
    u2 + 2.0 * d * u1 + d * d * mass
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert!((cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-15);
        // Q(10) = 7.6198530241605e-24
        assert!((sf(10.0) / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-12);
        assert!((interval(-1.0, 1.0) - 0.682_689_492_137_085_9).abs() < 1e-15);
        assert!((interval(f64::NEG_INFINITY, f64::INFINITY) - 1.0).abs() < 1e-16);
    }

    #[test]
    fn partial_second_moment() {
        assert!(
            (interval_second_moment(f64::NEG_INFINITY, f64::INFINITY, 0.0) - 1.0).abs() < 1e-15
        );
        assert!(
            (interval_second_moment(f64::NEG_INFINITY, f64::INFINITY, 2.0) - 5.0).abs() < 1e-14
        );
        let half = interval_second_moment(0.0, f64::INFINITY, 0.0);
        assert!((half - 0.5).abs() < 1e-15);
    }
}

//! Closed-form one-step Gaussian posterior.
//!
//! With scalar linear dynamics `x' = a x + b u`, reference `R = N(mu, sigma2)`,
//! and terminal cost `(q/2) x'^2`, the tilted one-step policy
//!
//! ```text
//!     Q*(u) prop. R(u) exp(-q (a x + b u)^2 / (2 lambda))
//! ```
//!
//! is again Gaussian: completing the square in `u` gives precision
//! `1/s2 = 1/sigma2 + q b^2 / lambda` and mean
//! `m = s2 (mu/sigma2 - q a b x / lambda)`. This module exposes that closed
//! form next to a brute-force quadrature of the same unnormalized density so
//! the algebra can be checked numerically rather than trusted.

use super::finite::OracleError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian1 {
    pub mean: f64,
    pub variance: f64,
}

/// Closed-form parameters of the tilted one-step policy.
pub fn gaussian_one_step(
    q: f64,
    a: f64,
    b: f64,
    sigma2: f64,
    lambda: f64,
    mu: f64,
    x: f64,
) -> Result<Gaussian1, OracleError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(OracleError::InvalidLambda(lambda));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(OracleError::InvalidDistribution(format!(
            "reference variance must be positive, got {sigma2}"
        )));
    }
    if q < 0.0 {
        return Err(OracleError::InvalidDistribution(format!(
            "quadratic cost weight must be nonnegative, got {q}"
        )));
    }
    let precision = 1.0 / sigma2 + q * b * b / lambda;
    let variance = 1.0 / precision;
    let mean = variance * (mu / sigma2 - q * a * b * x / lambda);
    Ok(Gaussian1 { mean, variance })
}

/// Mean and variance of the unnormalized density
/// `exp(-(u-mu)^2/(2 sigma2)) exp(-q (a x + b u)^2 / (2 lambda))`
/// by plain Riemann summation on a wide fine grid. Deliberately naive; this
/// is the independent check the closed form is validated against.
pub fn gaussian_one_step_quadrature(
    q: f64,
    a: f64,
    b: f64,
    sigma2: f64,
    lambda: f64,
    mu: f64,
    x: f64,
    points: usize,
) -> Gaussian1 {
    assert!(points >= 100, "quadrature needs a dense grid");
    // the posterior lives within a few deviations of both mu and the cost
    // minimum; cover both generously
    let sigma = sigma2.sqrt();
    let cost_min = if b != 0.0 { -a * x / b } else { mu };
    let center = 0.5 * (mu + cost_min);
    let spread = (mu - cost_min).abs() + 14.0 * sigma.max(1.0);
    let lo = center - spread;
    let hi = center + spread;
    let du = (hi - lo) / (points - 1) as f64;
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..points {
        let u = lo + du * i as f64;
        let log_f = -(u - mu).powi(2) / (2.0 * sigma2)
            - q * (a * x + b * u).powi(2) / (2.0 * lambda);
        let f = log_f.exp();
        m0 += f;
        m1 += f * u;
        m2 += f * u * u;
    }
    let mean = m1 / m0;
    Gaussian1 {
        mean,
        variance: m2 / m0 - mean * mean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cost_returns_the_reference() {
        let g = gaussian_one_step(0.0, 1.0, 1.0, 0.7, 2.0, 0.3, 5.0).unwrap();
        assert_relative_eq!(g.mean, 0.3);
        assert_relative_eq!(g.variance, 0.7);
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let q = rng.random_range(0.1..4.0);
            let a = rng.random_range(-2.0..2.0);
            let b = rng.random_range(0.2..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let sigma2 = rng.random_range(0.2..2.0);
            let lambda = rng.random_range(0.3..3.0);
            let mu = rng.random_range(-1.5..1.5);
            let x = rng.random_range(-3.0..3.0);
            let exact = gaussian_one_step(q, a, b, sigma2, lambda, mu, x).unwrap();
            let quad = gaussian_one_step_quadrature(q, a, b, sigma2, lambda, mu, x, 400_000);
            assert_relative_eq!(exact.mean, quad.mean, epsilon = 1e-6, max_relative = 1e-6);
            assert_relative_eq!(exact.variance, quad.variance, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn tilting_shrinks_variance_and_pulls_toward_cost_minimum() {
        // x' = x + u with x = 4: the cost minimum sits at u = -4
        let g = gaussian_one_step(3.0, 1.0, 1.0, 1.0, 1.0, 0.0, 4.0).unwrap();
        assert!(g.variance < 1.0);
        assert!(g.mean < 0.0 && g.mean > -4.0);
        // lambda -> inf recovers the reference
        let flat = gaussian_one_step(3.0, 1.0, 1.0, 1.0, 1e12, 0.0, 4.0).unwrap();
        assert_relative_eq!(flat.mean, 0.0, epsilon = 1e-9);
        assert_relative_eq!(flat.variance, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(gaussian_one_step(1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0).is_err());
        assert!(gaussian_one_step(1.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.0).is_err());
        assert!(gaussian_one_step(-0.5, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).is_err());
    }
}

//! Variational characterization of the free energy.
//!
//! On a finite outcome set with reference mass `R`, cost `C`, and
//! temperature `lambda`, the free energy
//!
//! ```text
//!     F = -lambda ln sum_i R_i exp(-C_i / lambda)
//! ```
//!
//! is the infimum over distributions `P` of `E_P[C] + lambda D(P || R)`, and
//! the infimum is attained exactly at the softmax
//! `P*_i prop. R_i exp(-C_i/lambda)`. [`legendre_duality_check`] evaluates
//! both sides of the inequality on caller-supplied trial distributions; it
//! is used as a structural test that the exponentiated-cost reweighting in
//! the sampler targets the correct distribution.

use super::finite::OracleError;

#[derive(Clone, Debug)]
pub struct DualityReport {
    /// `F = -lambda ln sum R exp(-C/lambda)`.
    pub free_energy: f64,
    /// The minimizer `P*`, normalized.
    pub softmax: Vec<f64>,
    /// `max over trials of F - (E_P[C] + lambda D(P||R))`; at most roundoff
    /// above zero when the bound holds.
    pub max_violation: f64,
    /// `|F - (E_{P*}[C] + lambda D(P*||R))|`, the duality gap at the softmax.
    pub softmax_gap: f64,
}

/// `E_P[C] + lambda D(P || R)` for one trial distribution.
fn dual_value(p: &[f64], reference: &[f64], cost: &[f64], lambda: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        if p[i] == 0.0 {
            continue;
        }
        if reference[i] == 0.0 {
            return f64::INFINITY;
        }
        acc += p[i] * cost[i] + lambda * p[i] * (p[i] / reference[i]).ln();
        if acc.is_nan() {
            // inf - inf from a forbidden cost against a negative KL term
            return f64::INFINITY;
        }
    }
    acc
}

fn check_distribution(name: &str, p: &[f64], len: usize) -> Result<(), OracleError> {
    if p.len() != len {
        return Err(OracleError::InvalidDistribution(format!(
            "{name} has {} entries, expected {len}",
            p.len()
        )));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(OracleError::InvalidDistribution(format!(
            "{name} has a negative or non-finite mass"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(OracleError::InvalidDistribution(format!(
            "{name} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Computes the free energy, its softmax minimizer, and the worst violation
/// of the lower bound across the supplied trial distributions.
pub fn legendre_duality_check(
    reference: &[f64],
    cost: &[f64],
    lambda: f64,
    trials: &[Vec<f64>],
) -> Result<DualityReport, OracleError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(OracleError::InvalidLambda(lambda));
    }
    check_distribution("reference", reference, reference.len())?;
    if cost.len() != reference.len() {
        return Err(OracleError::BadShape {
            field: "cost",
            details: format!("{} entries, expected {}", cost.len(), reference.len()),
        });
    }
    if cost.iter().any(|c| c.is_nan()) {
        return Err(OracleError::BadShape {
            field: "cost",
            details: "NaN entry".into(),
        });
    }
    let scores: Vec<f64> = reference
        .iter()
        .zip(cost)
        .map(|(&r, &c)| {
            if r > 0.0 && c.is_finite() {
                r.ln() - c / lambda
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(OracleError::InvalidDistribution(
            "every outcome with reference mass is forbidden".into(),
        ));
    }
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let free_energy = -lambda * lse;
    let softmax: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - lse).exp()
            }
        })
        .collect();
    let mut max_violation = f64::NEG_INFINITY;
    for (k, p) in trials.iter().enumerate() {
        check_distribution(&format!("trial {k}"), p, reference.len())?;
        let dual = dual_value(p, reference, cost, lambda);
        max_violation = max_violation.max(free_energy - dual);
    }
    let softmax_gap = (free_energy - dual_value(&softmax, reference, cost, lambda)).abs();
    Ok(DualityReport {
        free_energy,
        softmax,
        max_violation,
        softmax_gap,
    })
}

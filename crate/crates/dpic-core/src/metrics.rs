//! Detection-theoretic measurements.
//!
//! The selection step is observable: a watcher who knows the reference
//! policy can score each played control by how much likelier it was under
//! the weighted selection rule than under a uniform pick from the same
//! batch,
//!
//! ```text
//!     increment_k = ln( N r_k(j_k) / r_k ),      r_k = sum_i r_k(i)
//! ```
//!
//! whose cumulative sum is the log-likelihood-ratio (LLR) trace of an
//! episode. Its expectation is a stage-additive KL divergence, which the
//! Bretagnolle-Huber inequality turns into a floor on any detector's error
//! rates: FPR + FNR >= (1/2) exp(-D). This module computes the traces, the
//! exact KL divergences on finite instances, the error-rate sweep, and the
//! safety statistic used by the benchmark scenario, plus the CSV emitters
//! for all of the above.

use crate::model::{StateVector, Trajectory};
use crate::oracle::{FiniteKLProblem, OracleError, Transition, DEFAULT_ENUMERATION_CAP};
use crate::sampler::EpisodeRecord;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no episodes supplied")]
    Empty,
    #[error("episode {episode} has {got} steps, expected {expected}")]
    RaggedSeries {
        episode: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite LLR increment in episode {episode} at step {t}")]
    NonFiniteIncrement { episode: usize, t: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Cumulative LLR of one episode: entry `t` is the sum of the increments
/// of steps `k < t`, so the series starts at exactly 0 and has `T+1`
/// entries for a `T`-step episode.
pub fn episode_llr(record: &EpisodeRecord) -> Vec<f64> {
    let mut series = Vec::with_capacity(record.steps.len() + 1);
    let mut acc = 0.0;
    series.push(acc);
    for step in &record.steps {
        // the min-shift applied to the weights cancels in the ratio
        acc += (step.sample_count as f64 * step.selected_weight / step.total_weight).ln();
        series.push(acc);
    }
    series
}

/// Per-episode cumulative LLR traces with cross-episode aggregates.
#[derive(Clone, Debug)]
pub struct LLRSeries {
    /// `per_episode[e][t]`, each starting at 0.
    pub per_episode: Vec<Vec<f64>>,
    /// Mean across episodes at each `t`.
    pub mean: Vec<f64>,
    /// Sample standard deviation across episodes at each `t` (0 for a
    /// single episode).
    pub std: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

impl LLRSeries {
    pub fn aggregate(per_episode: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let Some(first) = per_episode.first() else {
            return Err(MetricsError::Empty);
        };
        let len = first.len();
        for (e, series) in per_episode.iter().enumerate() {
            if series.len() != len {
                return Err(MetricsError::RaggedSeries {
                    episode: e,
                    got: series.len(),
                    expected: len,
                });
            }
            if let Some(t) = series.iter().position(|v| !v.is_finite()) {
                return Err(MetricsError::NonFiniteIncrement { episode: e, t });
            }
        }
        let mut mean = Vec::with_capacity(len);
        let mut std = Vec::with_capacity(len);
        let mut column = vec![0.0; per_episode.len()];
        for t in 0..len {
            for (e, series) in per_episode.iter().enumerate() {
                column[e] = series[t];
            }
            let (m, s) = mean_std(&column);
            mean.push(m);
            std.push(s);
        }
        Ok(LLRSeries {
            per_episode,
            mean,
            std,
        })
    }

    pub fn from_records(records: &[EpisodeRecord]) -> Result<Self, MetricsError> {
        Self::aggregate(records.iter().map(episode_llr).collect())
    }

    pub fn episodes(&self) -> usize {
        self.per_episode.len()
    }

    pub fn final_values(&self) -> Vec<f64> {
        self.per_episode.iter().map(|s| *s.last().unwrap()).collect()
    }

    pub fn final_mean(&self) -> f64 {
        *self.mean.last().unwrap()
    }

    pub fn final_std(&self) -> f64 {
        *self.std.last().unwrap()
    }

    /// Standard error of the final mean.
    pub fn final_se(&self) -> f64 {
        self.final_std() / (self.episodes() as f64).sqrt()
    }
}

/// State visitation `mu[t][x]` under policy `q`, by forward propagation
/// from the instance's initial state.
pub fn visitation(
    prob: &FiniteKLProblem,
    q: &[Vec<Vec<f64>>],
) -> Result<Vec<Vec<f64>>, OracleError> {
    prob.validate()?;
    check_policy_shape(prob, q)?;
    let mut mu = vec![vec![0.0; prob.n_states]; prob.horizon + 1];
    mu[0][prob.initial_state] = 1.0;
    for t in 0..prob.horizon {
        for x in 0..prob.n_states {
            if mu[t][x] == 0.0 {
                continue;
            }
            for u in 0..prob.n_actions {
                let w = mu[t][x] * q[t][x][u];
                if w == 0.0 {
                    continue;
                }
                match &prob.transition {
                    Transition::Deterministic(next) => mu[t + 1][next[t][x][u]] += w,
                    Transition::Stochastic(next) => {
                        for &(nx, p) in &next[t][x][u] {
                            mu[t + 1][nx] += w * p;
                        }
                    }
                }
            }
        }
    }
    Ok(mu)
}

fn check_policy_shape(prob: &FiniteKLProblem, q: &[Vec<Vec<f64>>]) -> Result<(), OracleError> {
    if q.len() != prob.horizon
        || q.iter()
            .any(|per_state| per_state.len() != prob.n_states
                || per_state.iter().any(|row| row.len() != prob.n_actions))
    {
        return Err(OracleError::BadShape {
            field: "policy",
            details: "policy tables do not match the instance shape".into(),
        });
    }
    Ok(())
}

/// Stage-additive divergence `sum_t E_mu[ D(q_t(.|x) || R_t(.|x)) ]` under
/// the supplied visitation. Returns `+inf` when `q` places mass where the
/// reference has none.
pub fn stagewise_kl_finite(
    prob: &FiniteKLProblem,
    q: &[Vec<Vec<f64>>],
    mu: &[Vec<f64>],
) -> Result<f64, OracleError> {
    prob.validate()?;
    check_policy_shape(prob, q)?;
    let mut kl = 0.0;
    for t in 0..prob.horizon {
        for x in 0..prob.n_states {
            if mu[t][x] == 0.0 {
                continue;
            }
            for u in 0..prob.n_actions {
                let qq = q[t][x][u];
                if qq == 0.0 {
                    continue;
                }
                let rr = prob.reference[t][x][u];
                if rr == 0.0 {
                    return Ok(f64::INFINITY);
                }
                kl += mu[t][x] * qq * (qq / rr).ln();
            }
        }
    }
    Ok(kl)
}

/// Joint path-space divergence `D(Q || R)` by exhaustive enumeration of
/// action sequences (deterministic transitions only). The transition
/// factors shared by both laws cancel in the ratio.
pub fn joint_path_kl(prob: &FiniteKLProblem, q: &[Vec<Vec<f64>>]) -> Result<f64, OracleError> {
    let mut kl = 0.0;
    enumerate_paths(prob, q, DEFAULT_ENUMERATION_CAP, |p_q, p_r, _| {
        if p_q > 0.0 {
            if p_r == 0.0 {
                kl = f64::INFINITY;
            } else {
                kl += p_q * (p_q / p_r).ln();
            }
        }
    })?;
    Ok(kl)
}

/// Walks every action sequence of a deterministic instance, calling the
/// visitor with the path probability under `q`, under the reference, and
/// the path's LLR `ln(p_q / p_r)` (only when both are positive).
fn enumerate_paths<F>(
    prob: &FiniteKLProblem,
    q: &[Vec<Vec<f64>>],
    cap: u64,
    mut visit: F,
) -> Result<(), OracleError>
where
    F: FnMut(f64, f64, f64),
{
    prob.validate()?;
    check_policy_shape(prob, q)?;
    let Transition::Deterministic(next) = &prob.transition else {
        return Err(OracleError::StochasticUnsupported);
    };
    let steps = prob.horizon;
    let sequences = (prob.n_actions as f64).powi(steps as i32);
    if sequences > cap as f64 {
        return Err(OracleError::EnumerationCap { sequences, cap });
    }
    let mut digits = vec![0usize; steps];
    loop {
        let mut x = prob.initial_state;
        let mut p_q = 1.0;
        let mut p_r = 1.0;
        for (k, &u) in digits.iter().enumerate() {
            p_q *= q[k][x][u];
            p_r *= prob.reference[k][x][u];
            x = next[k][x][u];
        }
        let llr = if p_q > 0.0 && p_r > 0.0 {
            (p_q / p_r).ln()
        } else {
            f64::NAN
        };
        visit(p_q, p_r, llr);
        let mut pos = 0;
        loop {
            if pos == steps {
                return Ok(());
            }
            digits[pos] += 1;
            if digits[pos] < prob.n_actions {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// `(1/2) exp(-kl)`, the floor on FPR + FNR of any detector deciding
/// between the two path laws.
pub fn bh_bound(kl: f64) -> f64 {
    assert!(kl >= 0.0 && !kl.is_nan(), "divergence must be nonnegative");
    0.5 * (-kl).exp()
}

#[derive(Clone, Copy, Debug)]
pub struct ThresholdPoint {
    pub threshold: f64,
    /// `Pr_R[pi > c]`: reference behaviour flagged anyway.
    pub false_positive: f64,
    /// `Pr_Q[pi <= c]`: tilted behaviour passing as reference.
    pub false_negative: f64,
}

#[derive(Clone, Debug)]
pub struct DetectionReport {
    /// Exact `D(Q || R)` over paths.
    pub kl_estimate: f64,
    /// `(1/2) exp(-kl_estimate)`.
    pub bh_lower_bound: f64,
    pub sweep: Vec<ThresholdPoint>,
}

impl DetectionReport {
    pub fn min_error_sum(&self) -> f64 {
        self.sweep
            .iter()
            .map(|p| p.false_positive + p.false_negative)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exact error rates of the threshold test "decide reference if the path
/// LLR is at most `c`", for each supplied `c`, by full path enumeration.
/// Paths with `p_r = 0, p_q > 0` have LLR `+inf` (always flagged); the
/// reverse carry no `Q` mass and count only toward false positives at
/// `c = inf`.
pub fn detection_sweep(
    prob: &FiniteKLProblem,
    q: &[Vec<Vec<f64>>],
    thresholds: &[f64],
) -> Result<DetectionReport, OracleError> {
    let mut mass_points: Vec<(f64, f64, f64)> = Vec::new(); // (llr, p_r, p_q)
    let mut kl = 0.0;
    enumerate_paths(prob, q, DEFAULT_ENUMERATION_CAP, |p_q, p_r, llr| {
        if p_q == 0.0 && p_r == 0.0 {
            return;
        }
        let llr = if p_q > 0.0 && p_r > 0.0 {
            llr
        } else if p_q > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        if p_q > 0.0 {
            kl += p_q * llr; // llr finite or +inf; +inf propagates to kl
        }
        mass_points.push((llr, p_r, p_q));
    })?;
    let bound = bh_bound(kl.max(0.0));
    let mut sweep = Vec::with_capacity(thresholds.len());
    for &c in thresholds {
        let mut fpr = 0.0;
        let mut fnr = 0.0;
        for &(llr, p_r, p_q) in &mass_points {
            if llr > c {
                fpr += p_r;
            } else {
                fnr += p_q;
            }
        }
        // guaranteed for exact enumeration; a failure is an arithmetic bug
        assert!(
            fpr + fnr >= bound - 1e-12,
            "error floor breached at c={c}: {fpr}+{fnr} < {bound}"
        );
        sweep.push(ThresholdPoint {
            threshold: c,
            false_positive: fpr,
            false_negative: fnr,
        });
    }
    Ok(DetectionReport {
        kl_estimate: kl,
        bh_lower_bound: bound,
        sweep,
    })
}

/// Evenly spaced thresholds covering `[lo, hi]`.
pub fn even_thresholds(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && hi > lo);
    let step = (hi - lo) / (count - 1) as f64;
    (0..count).map(|i| lo + step * i as f64).collect()
}

/// Fraction of trajectories whose every state stays outside the region.
pub fn pr_safe<F>(paths: &[Trajectory], mut in_region: F) -> f64
where
    F: FnMut(&StateVector) -> bool,
{
    assert!(!paths.is_empty(), "pr_safe over an empty set");
    let safe = paths
        .iter()
        .filter(|p| !p.states().iter().any(|x| in_region(x)))
        .count();
    safe as f64 / paths.len() as f64
}

/// All float columns carry 17 significant digits so artifacts are
/// bit-reconstructible.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// `llr.csv`: one row per (episode, t).
pub fn write_llr_csv<W: Write>(mut w: W, series: &LLRSeries) -> io::Result<()> {
    writeln!(w, "episode,t,cum_llr")?;
    for (e, per_t) in series.per_episode.iter().enumerate() {
        for (t, v) in per_t.iter().enumerate() {
            writeln!(w, "{e},{t},{}", format_float(*v))?;
        }
    }
    Ok(())
}

/// One aggregate row of `summary.csv`. The reference policy is recorded
/// with `lambda = inf` (no cost tilt).
#[derive(Clone, Copy, Debug)]
pub struct SummaryRow {
    pub lambda: f64,
    pub samples: usize,
    pub pr_safe: f64,
    pub mean_final_llr: f64,
    pub std_final_llr: f64,
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> io::Result<()> {
    writeln!(w, "lambda,n,pr_safe,mean_final_llr,std_final_llr")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            format_float(r.lambda),
            r.samples,
            format_float(r.pr_safe),
            format_float(r.mean_final_llr),
            format_float(r.std_final_llr)
        )?;
    }
    Ok(())
}

//! Exact dynamic programming on finite instances.
//!
//! A [`FiniteKLProblem`] is a small enumerable control problem: finite state
//! and action sets, per-stage reference distributions `R_t(u|x)`, stage and
//! terminal costs, and either deterministic or stochastic transitions. On
//! such instances the value recursion
//!
//! ```text
//!     J_t(x) = -lambda ln sum_u R_t(u|x) exp(-(C_t(x,u) + E[J_{t+1}(X')])/lambda)
//! ```
//!
//! and the softmax optimal policy are computable exactly, which makes these
//! problems the ground truth that the Monte-Carlo sampler is tested
//! against. All log-sum-exp arithmetic is done in the log domain so small
//! `lambda` stays stable.

use crate::model::{
    ControlVector, CostModel, DeterministicDynamics, StateVector, StochasticPolicy,
};
use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("reference distribution at (t={t}, x={x}) sums to {sum:.17}, expected 1")]
    UnnormalizedReference { t: usize, x: usize, sum: f64 },
    #[error("field {field} has wrong shape: {details}")]
    BadShape {
        field: &'static str,
        details: String,
    },
    #[error("invalid transition at (t={t}, x={x}, u={u}): {details}")]
    BadTransition {
        t: usize,
        x: usize,
        u: usize,
        details: String,
    },
    #[error("state (t={t}, x={x}) has no finite-cost continuation")]
    InfeasibleState { t: usize, x: usize },
    #[error("{sequences:.0} action sequences exceed the enumeration cap {cap}")]
    EnumerationCap { sequences: f64, cap: u64 },
    #[error("operation requires deterministic transitions")]
    StochasticUnsupported,
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("grid out of bounds at t={t}: {details}")]
    GridOutOfBounds { t: usize, details: String },
    #[error("reference policy reports no density at t={t}; grid quadrature needs one")]
    DensityRequired { t: usize },
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Transition structure: exactly one successor per `(t, x, u)` or a
/// distribution over successors.
#[derive(Clone, Debug, PartialEq)]
pub enum Transition {
    /// `next[t][x][u]` is the unique successor state.
    Deterministic(Vec<Vec<Vec<usize>>>),
    /// `next[t][x][u]` lists `(successor, probability)` pairs.
    Stochastic(Vec<Vec<Vec<Vec<(usize, f64)>>>>),
}

/// Finite enumerable instance of the KL-control problem.
///
/// Indexing convention throughout: `table[t][x][u]`.
#[derive(Clone, Debug)]
pub struct FiniteKLProblem {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub initial_state: usize,
    /// `R_t(u|x)`, strictly positive exactly where action `u` is allowed.
    pub reference: Vec<Vec<Vec<f64>>>,
    /// Stage costs; `+inf` marks a forbidden pair.
    pub stage_cost: Vec<Vec<Vec<f64>>>,
    pub terminal_cost: Vec<f64>,
    pub transition: Transition,
}

/// Default guard for exhaustive path enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

const NORMALIZATION_TOL: f64 = 1e-9;

fn check_table_shape(
    field: &'static str,
    table: &[Vec<Vec<f64>>],
    horizon: usize,
    n_states: usize,
    n_actions: usize,
) -> Result<(), OracleError> {
    if table.len() != horizon {
        return Err(OracleError::BadShape {
            field,
            details: format!("{} stages, expected {horizon}", table.len()),
        });
    }
    for (t, per_state) in table.iter().enumerate() {
        if per_state.len() != n_states {
            return Err(OracleError::BadShape {
                field,
                details: format!("stage {t} has {} states, expected {n_states}", per_state.len()),
            });
        }
        for (x, row) in per_state.iter().enumerate() {
            if row.len() != n_actions {
                return Err(OracleError::BadShape {
                    field,
                    details: format!(
                        "stage {t} state {x} has {} actions, expected {n_actions}",
                        row.len()
                    ),
                });
            }
        }
    }
    Ok(())
}

impl FiniteKLProblem {
    pub fn is_deterministic(&self) -> bool {
        matches!(self.transition, Transition::Deterministic(_))
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(OracleError::InvalidLambda(self.lambda));
        }
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(OracleError::BadShape {
                field: "sets",
                details: "state and action sets must be nonempty".into(),
            });
        }
        if self.initial_state >= self.n_states {
            return Err(OracleError::BadShape {
                field: "initial_state",
                details: format!("{} not in 0..{}", self.initial_state, self.n_states),
            });
        }
        check_table_shape(
            "reference",
            &self.reference,
            self.horizon,
            self.n_states,
            self.n_actions,
        )?;
        check_table_shape(
            "stage_cost",
            &self.stage_cost,
            self.horizon,
            self.n_states,
            self.n_actions,
        )?;
        if self.terminal_cost.len() != self.n_states {
            return Err(OracleError::BadShape {
                field: "terminal_cost",
                details: format!("{} entries, expected {}", self.terminal_cost.len(), self.n_states),
            });
        }
        for (t, per_state) in self.reference.iter().enumerate() {
            for (x, row) in per_state.iter().enumerate() {
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(OracleError::InvalidDistribution(format!(
                        "reference row (t={t}, x={x}) has a negative or non-finite mass"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(OracleError::UnnormalizedReference { t, x, sum });
                }
            }
        }
        for (t, per_state) in self.stage_cost.iter().enumerate() {
            for (x, row) in per_state.iter().enumerate() {
                if let Some(u) = row.iter().position(|c| c.is_nan()) {
                    return Err(OracleError::BadShape {
                        field: "stage_cost",
                        details: format!("NaN at (t={t}, x={x}, u={u})"),
                    });
                }
            }
        }
        if self.terminal_cost.iter().any(|c| c.is_nan()) {
            return Err(OracleError::BadShape {
                field: "terminal_cost",
                details: "NaN entry".into(),
            });
        }
        match &self.transition {
            Transition::Deterministic(next) => {
                if next.len() != self.horizon {
                    return Err(OracleError::BadShape {
                        field: "transition",
                        details: format!("{} stages, expected {}", next.len(), self.horizon),
                    });
                }
                for (t, per_state) in next.iter().enumerate() {
                    for (x, row) in per_state.iter().enumerate() {
                        if per_state.len() != self.n_states || row.len() != self.n_actions {
                            return Err(OracleError::BadShape {
                                field: "transition",
                                details: format!("bad shape at (t={t}, x={x})"),
                            });
                        }
                        for (u, &nx) in row.iter().enumerate() {
                            if nx >= self.n_states {
                                return Err(OracleError::BadTransition {
                                    t,
                                    x,
                                    u,
                                    details: format!("successor {nx} out of range"),
                                });
                            }
                        }
                    }
                }
            }
            Transition::Stochastic(next) => {
                if next.len() != self.horizon {
                    return Err(OracleError::BadShape {
                        field: "transition",
                        details: format!("{} stages, expected {}", next.len(), self.horizon),
                    });
                }
                for (t, per_state) in next.iter().enumerate() {
                    for (x, row) in per_state.iter().enumerate() {
                        if per_state.len() != self.n_states || row.len() != self.n_actions {
                            return Err(OracleError::BadShape {
                                field: "transition",
                                details: format!("bad shape at (t={t}, x={x})"),
                            });
                        }
                        for (u, dist) in row.iter().enumerate() {
                            let mut sum = 0.0;
                            for &(nx, p) in dist {
                                if nx >= self.n_states {
                                    return Err(OracleError::BadTransition {
                                        t,
                                        x,
                                        u,
                                        details: format!("successor {nx} out of range"),
                                    });
                                }
                                if p < 0.0 || !p.is_finite() {
                                    return Err(OracleError::BadTransition {
                                        t,
                                        x,
                                        u,
                                        details: format!("probability {p} invalid"),
                                    });
                                }
                                sum += p;
                            }
                            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                                return Err(OracleError::BadTransition {
                                    t,
                                    x,
                                    u,
                                    details: format!("successor masses sum to {sum}"),
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Expected continuation value `E[J_{t+1}(X_{t+1}) | x, u]`.
    fn continuation(&self, next_value: &[f64], t: usize, x: usize, u: usize) -> f64 {
        match &self.transition {
            Transition::Deterministic(next) => next_value[next[t][x][u]],
            Transition::Stochastic(next) => {
                let mut acc = 0.0;
                for &(nx, p) in &next[t][x][u] {
                    if p > 0.0 {
                        acc += p * next_value[nx];
                        if acc.is_infinite() {
                            return f64::INFINITY;
                        }
                    }
                }
                acc
            }
        }
    }

    /// The canonical two-action single-state fixture: horizon 1, uniform
    /// reference, stage costs `{0, lambda ln 3}`, zero terminal cost. Its
    /// optimal policy is exactly `(3/4, 1/4)`.
    pub fn two_action(lambda: f64) -> Self {
        FiniteKLProblem {
            n_states: 1,
            n_actions: 2,
            horizon: 1,
            lambda,
            initial_state: 0,
            reference: vec![vec![vec![0.5, 0.5]]],
            stage_cost: vec![vec![vec![0.0, lambda * 3.0_f64.ln()]]],
            terminal_cost: vec![0.0],
            transition: Transition::Deterministic(vec![vec![vec![0, 0]]]),
        }
    }

    /// Draws a random deterministic instance, used as a test fixture
    /// factory. Reference rows are strictly positive, stage costs uniform
    /// in `[0, 3]`.
    pub fn random_deterministic<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        lambda: f64,
    ) -> Self {
        let mut reference = Vec::with_capacity(horizon);
        let mut stage_cost = Vec::with_capacity(horizon);
        let mut next = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut r_t = Vec::with_capacity(n_states);
            let mut c_t = Vec::with_capacity(n_states);
            let mut n_t = Vec::with_capacity(n_states);
            for _ in 0..n_states {
                // exp(gumbel-ish) positive masses, normalized
                let raw: Vec<f64> = (0..n_actions)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0).exp())
                    .collect();
                let sum: f64 = raw.iter().sum();
                r_t.push(raw.into_iter().map(|v| v / sum).collect());
                c_t.push((0..n_actions).map(|_| 3.0 * rng.random::<f64>()).collect());
                n_t.push((0..n_actions).map(|_| rng.random_range(0..n_states)).collect());
            }
            reference.push(r_t);
            stage_cost.push(c_t);
            next.push(n_t);
        }
        FiniteKLProblem {
            n_states,
            n_actions,
            horizon,
            lambda,
            initial_state: 0,
            reference,
            stage_cost,
            terminal_cost: (0..n_states).map(|_| 3.0 * rng.random::<f64>()).collect(),
            transition: Transition::Deterministic(next),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, OracleError> {
        let file: FixtureFile =
            toml::from_str(text).map_err(|e| OracleError::Fixture(e.to_string()))?;
        file.into_problem()
    }

    pub fn load(path: &std::path::Path) -> Result<Self, OracleError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Exact tables produced by the backward recursion.
#[derive(Clone, Debug)]
pub struct DpSolution {
    /// `value[t][x] = J_t(x)` for `t` in `0..=horizon`.
    pub value: Vec<Vec<f64>>,
    /// `policy[t][x][u] = Q*_t(u|x)` for `t` in `0..horizon`.
    pub policy: Vec<Vec<Vec<f64>>>,
    /// `log_desirability[t][x] = -J_t(x)/lambda`.
    pub log_desirability: Vec<Vec<f64>>,
}

impl DpSolution {
    /// `Z_t(x) = exp(-J_t(x)/lambda)` tables.
    pub fn desirability(&self) -> Vec<Vec<f64>> {
        self.log_desirability
            .iter()
            .map(|row| row.iter().map(|&v| v.exp()).collect())
            .collect()
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Solves the backward recursion exactly, producing value, policy, and
/// desirability tables. Supports both transition modes.
pub fn enumerate_dp(prob: &FiniteKLProblem) -> Result<DpSolution, OracleError> {
    prob.validate()?;
    let t_max = prob.horizon;
    let mut value = vec![vec![0.0; prob.n_states]; t_max + 1];
    let mut policy = vec![vec![vec![0.0; prob.n_actions]; prob.n_states]; t_max];
    let mut log_z = vec![vec![0.0; prob.n_states]; t_max + 1];
    value[t_max] = prob.terminal_cost.clone();
    for x in 0..prob.n_states {
        log_z[t_max][x] = -prob.terminal_cost[x] / prob.lambda;
    }
    let mut scores = vec![f64::NEG_INFINITY; prob.n_actions];
    for t in (0..t_max).rev() {
        let (head, tail) = value.split_at_mut(t + 1);
        let next_value = &tail[0];
        for x in 0..prob.n_states {
            for u in 0..prob.n_actions {
                let r = prob.reference[t][x][u];
                scores[u] = if r > 0.0 {
                    let rho = prob.stage_cost[t][x][u] + prob.continuation(next_value, t, x, u);
                    if rho.is_finite() {
                        r.ln() - rho / prob.lambda
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    f64::NEG_INFINITY
                };
            }
            let lse = log_sum_exp(&scores);
            if lse == f64::NEG_INFINITY {
                return Err(OracleError::InfeasibleState { t, x });
            }
            head[t][x] = -prob.lambda * lse;
            log_z[t][x] = lse;
            for u in 0..prob.n_actions {
                policy[t][x][u] = if scores[u] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (scores[u] - lse).exp()
                };
            }
        }
    }
    Ok(DpSolution {
        value,
        policy,
        log_desirability: log_z,
    })
}

/// Linear backward recursion for the desirability function under
/// deterministic transitions:
///
/// ```text
///     Z_T(x) = exp(-C_T(x)/lambda)
///     Z_t(x) = sum_u R_t(u|x) exp(-C_t(x,u)/lambda) Z_{t+1}(F_t(x,u))
/// ```
///
/// Returned as plain (non-log) tables, `z[t][x]`.
pub fn z_recursion(prob: &FiniteKLProblem) -> Result<Vec<Vec<f64>>, OracleError> {
    prob.validate()?;
    let Transition::Deterministic(next) = &prob.transition else {
        return Err(OracleError::StochasticUnsupported);
    };
    let t_max = prob.horizon;
    let mut z = vec![vec![0.0; prob.n_states]; t_max + 1];
    for x in 0..prob.n_states {
        z[t_max][x] = (-prob.terminal_cost[x] / prob.lambda).exp();
    }
    for t in (0..t_max).rev() {
        for x in 0..prob.n_states {
            let mut acc = 0.0;
            for u in 0..prob.n_actions {
                let r = prob.reference[t][x][u];
                if r > 0.0 {
                    let c = prob.stage_cost[t][x][u];
                    if c.is_finite() {
                        acc += r * (-c / prob.lambda).exp() * z[t + 1][next[t][x][u]];
                    }
                }
            }
            z[t][x] = acc;
        }
    }
    Ok(z)
}

/// Desirability at `(t, x)` by exhaustive enumeration of all action
/// sequences, the literal path-integral expectation
/// `E_R[exp(-C_{t:T}/lambda)]`. Errors out (producing no partial result)
/// if the number of sequences exceeds `cap`.
pub fn path_integral_z(
    prob: &FiniteKLProblem,
    t: usize,
    x: usize,
    cap: u64,
) -> Result<f64, OracleError> {
    prob.validate()?;
    let Transition::Deterministic(next) = &prob.transition else {
        return Err(OracleError::StochasticUnsupported);
    };
    assert!(t <= prob.horizon, "start time beyond horizon");
    assert!(x < prob.n_states, "state index out of range");
    let steps = prob.horizon - t;
    let sequences = (prob.n_actions as f64).powi(steps as i32);
    if sequences > cap as f64 {
        return Err(OracleError::EnumerationCap { sequences, cap });
    }
    if steps == 0 {
        return Ok((-prob.terminal_cost[x] / prob.lambda).exp());
    }
    let mut digits = vec![0usize; steps];
    let mut total = 0.0;
    loop {
        let mut state = x;
        let mut mass = 1.0;
        let mut cost = 0.0;
        let mut alive = true;
        for (k, &u) in digits.iter().enumerate() {
            let r = prob.reference[t + k][state][u];
            if r == 0.0 {
                alive = false;
                break;
            }
            mass *= r;
            cost += prob.stage_cost[t + k][state][u];
            state = next[t + k][state][u];
        }
        if alive {
            cost += prob.terminal_cost[state];
            if cost.is_finite() {
                total += mass * (-cost / prob.lambda).exp();
            }
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == steps {
                return Ok(total);
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

/// The objective of Problem 1, `E_Q[C_{0:T}] + lambda D(Q || R)`, for an
/// arbitrary policy given as `q[t][x][u]` tables, evaluated exactly by
/// forward propagation of the visitation distribution under `q`.
///
/// Returns `+inf` if `q` places mass where the reference has none or on a
/// forbidden stage cost.
pub fn policy_objective(prob: &FiniteKLProblem, q: &[Vec<Vec<f64>>]) -> Result<f64, OracleError> {
    prob.validate()?;
    if q.len() != prob.horizon {
        return Err(OracleError::BadShape {
            field: "policy",
            details: format!("{} stages, expected {}", q.len(), prob.horizon),
        });
    }
    let mut mu = vec![0.0; prob.n_states];
    mu[prob.initial_state] = 1.0;
    let mut expected_cost = 0.0;
    let mut kl = 0.0;
    for t in 0..prob.horizon {
        let mut mu_next = vec![0.0; prob.n_states];
        for x in 0..prob.n_states {
            if mu[x] == 0.0 {
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
                let w = mu[x] * qq;
                expected_cost += w * prob.stage_cost[t][x][u];
                kl += w * (qq / rr).ln();
                match &prob.transition {
                    Transition::Deterministic(next) => mu_next[next[t][x][u]] += w,
                    Transition::Stochastic(next) => {
                        for &(nx, p) in &next[t][x][u] {
                            mu_next[nx] += w * p;
                        }
                    }
                }
            }
        }
        mu = mu_next;
    }
    for x in 0..prob.n_states {
        expected_cost += mu[x] * prob.terminal_cost[x];
    }
    Ok(expected_cost + prob.lambda * kl)
}

/// Views a deterministic finite problem through the continuous-interface
/// traits so the rollout sampler can run on it. States and actions are
/// encoded as their indices in 1-D vectors.
pub struct FiniteDynamics<'a> {
    prob: &'a FiniteKLProblem,
    next: &'a [Vec<Vec<usize>>],
}

pub struct FiniteReference<'a> {
    prob: &'a FiniteKLProblem,
}

pub struct FiniteCost<'a> {
    prob: &'a FiniteKLProblem,
}

/// Splits a deterministic problem into sampler-facing dynamics, reference
/// policy, and cost model views.
pub fn embed(
    prob: &FiniteKLProblem,
) -> Result<(FiniteDynamics<'_>, FiniteReference<'_>, FiniteCost<'_>), OracleError> {
    prob.validate()?;
    let Transition::Deterministic(next) = &prob.transition else {
        return Err(OracleError::StochasticUnsupported);
    };
    Ok((
        FiniteDynamics { prob, next },
        FiniteReference { prob },
        FiniteCost { prob },
    ))
}

#[inline]
fn index_of(v: &StateVector) -> usize {
    v[0] as usize
}

#[inline]
fn action_of(u: &ControlVector) -> usize {
    u[0] as usize
}

impl DeterministicDynamics for FiniteDynamics<'_> {
    fn horizon(&self) -> usize {
        self.prob.horizon
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn step(&self, t: usize, x: &StateVector, u: &ControlVector) -> StateVector {
        StateVector::from([self.next[t][index_of(x)][action_of(u)] as f64])
    }
}

impl StochasticPolicy for FiniteReference<'_> {
    fn control_dim(&self) -> usize {
        1
    }

    fn sample<R: Rng + ?Sized>(&self, t: usize, x: &StateVector, rng: &mut R) -> ControlVector {
        let row = &self.prob.reference[t][index_of(x)];
        let v: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = row.len() - 1;
        for (u, &p) in row.iter().enumerate() {
            acc += p;
            if v < acc {
                chosen = u;
                break;
            }
        }
        // guard against v landing in the roundoff sliver past the last
        // positive mass
        while row[chosen] == 0.0 {
            chosen -= 1;
        }
        ControlVector::from([chosen as f64])
    }

    /// Log-mass with respect to counting measure.
    fn log_density(&self, t: usize, x: &StateVector, u: &ControlVector) -> Option<f64> {
        Some(self.prob.reference[t][index_of(x)][action_of(u)].ln())
    }
}

impl CostModel for FiniteCost<'_> {
    fn stage(&self, t: usize, x: &StateVector, u: &ControlVector) -> f64 {
        self.prob.stage_cost[t][index_of(x)][action_of(u)]
    }
    fn terminal(&self, x: &StateVector) -> f64 {
        self.prob.terminal_cost[index_of(x)]
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    horizon: usize,
    states: usize,
    actions: usize,
    lambda: f64,
    #[serde(default)]
    initial_state: usize,
    terminal_cost: Vec<f64>,
    stage: Vec<FixtureStage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureStage {
    reference: Vec<Vec<f64>>,
    cost: Vec<Vec<f64>>,
    #[serde(default)]
    next: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    next_dist: Option<Vec<Vec<Vec<(usize, f64)>>>>,
}

impl FixtureFile {
    fn into_problem(self) -> Result<FiniteKLProblem, OracleError> {
        // one stage with horizon > 1 is the stationary shorthand
        let stages: Vec<&FixtureStage> = if self.stage.len() == 1 && self.horizon > 1 {
            std::iter::repeat(&self.stage[0]).take(self.horizon).collect()
        } else if self.stage.len() == self.horizon {
            self.stage.iter().collect()
        } else {
            return Err(OracleError::Fixture(format!(
                "{} stage blocks for horizon {}",
                self.stage.len(),
                self.horizon
            )));
        };
        let deterministic = stages[0].next.is_some();
        for (t, s) in stages.iter().enumerate() {
            match (s.next.is_some(), s.next_dist.is_some()) {
                (true, true) | (false, false) => {
                    return Err(OracleError::Fixture(format!(
                        "stage {t} must set exactly one of `next` and `next_dist`"
                    )))
                }
                (d, _) if d != deterministic => {
                    return Err(OracleError::Fixture(
                        "stages mix deterministic and stochastic transitions".into(),
                    ))
                }
                _ => {}
            }
        }
        let transition = if deterministic {
            Transition::Deterministic(stages.iter().map(|s| s.next.clone().unwrap()).collect())
        } else {
            Transition::Stochastic(stages.iter().map(|s| s.next_dist.clone().unwrap()).collect())
        };
        let prob = FiniteKLProblem {
            n_states: self.states,
            n_actions: self.actions,
            horizon: self.horizon,
            lambda: self.lambda,
            initial_state: self.initial_state,
            reference: stages.iter().map(|s| s.reference.clone()).collect(),
            stage_cost: stages.iter().map(|s| s.cost.clone()).collect(),
            terminal_cost: self.terminal_cost,
            transition,
        };
        prob.validate()?;
        Ok(prob)
    }
}

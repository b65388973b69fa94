//! Path-integral sampling of deceptive actions.
//!
//! At every decision step `(t, x_t)` the agent draws N forward rollouts
//! under the reference policy R, weights rollout i by its exponentiated
//! tail cost
//!
//! ```text
//!     r_t(i) = exp(-C_{t:T}(i) / lambda),
//! ```
//!
//! and selects one rollout by inverse CDF over the weight prefix sums
//! (a draw d ~ unif[0, r_t] mapped through F_t^{-1}). The first control of
//! the selected rollout is played. As N grows, the selected control's
//! conditional law converges to the optimal deceptive policy
//! `Q* ∝ exp(-rho_t/lambda) R`.
//!
//! Weights are computed with the tail costs shifted by their minimum, which
//! leaves every selection ratio r_t(i)/r_t unchanged but keeps the
//! exponentials away from underflow.
//!
//! Rollout randomness is keyed by (episode, t, i) through [`SeedLineage`],
//! so batches are bitwise reproducible for a given master seed no matter
//! how many worker threads execute them.

mod streams;

pub use streams::{EpisodeSeed, SeedLineage};

use crate::model::{
    ControlVector, CostModel, DeterministicDynamics, StateVector, StochasticPolicy, Trajectory,
};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no admissible rollout at step {t}: all {n} sampled tails have infinite cost")]
    NoAdmissibleRollout { t: usize, n: usize },
    #[error("lambda must be positive and finite, got {lambda}")]
    InvalidLambda { lambda: f64 },
    #[error("tail cost of rollout {index} is NaN")]
    NanTailCost { index: usize },
}

/// Rollouts below this count stay on the calling thread; above it they are
/// chunked across the rayon pool.
const PAR_MIN_CHUNK: usize = 256;

/// N sampled trajectory tails from a common origin `(t, x_t)`, each with
/// its tail cost `C_{t:T}(i)`.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    origin_time: usize,
    origin_state: StateVector,
    paths: Vec<Trajectory>,
    tail_costs: Vec<f64>,
}

impl RolloutBatch {
    /// Assembles a batch from pre-built tails, checking that every tail
    /// starts at the claimed origin.
    pub fn new(origin_time: usize, origin_state: StateVector, paths: Vec<Trajectory>) -> Self {
        assert!(!paths.is_empty(), "a rollout batch needs at least one path");
        for p in &paths {
            assert_eq!(p.start_time(), origin_time, "tail start time mismatch");
            assert_eq!(p.states()[0], origin_state, "tail origin state mismatch");
        }
        let tail_costs = paths.iter().map(|p| p.path_cost()).collect();
        RolloutBatch {
            origin_time,
            origin_state,
            paths,
            tail_costs,
        }
    }

    pub fn origin_time(&self) -> usize {
        self.origin_time
    }

    pub fn origin_state(&self) -> &StateVector {
        &self.origin_state
    }

    pub fn paths(&self) -> &[Trajectory] {
        &self.paths
    }

    pub fn tail_costs(&self) -> &[f64] {
        &self.tail_costs
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Samples N independent rollout tails from `(t, x_t)` under the reference
/// policy. Rollout i consumes the stream keyed `(episode, t, i)`, so the
/// result is a pure function of `(seed, t, x_t, n)`.
pub fn rollout_batch<D, P, C>(
    dynamics: &D,
    reference: &P,
    costs: &C,
    t: usize,
    x_t: &StateVector,
    n: usize,
    seed: EpisodeSeed,
) -> RolloutBatch
where
    D: DeterministicDynamics + Sync,
    P: StochasticPolicy + Sync,
    C: CostModel + Sync,
{
    assert!(n >= 1, "need at least one rollout");
    assert!(t < dynamics.horizon(), "batch origin must precede the horizon");
    let paths: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .with_min_len(PAR_MIN_CHUNK)
        .map(|i| {
            let mut rng = seed.rollout_rng(t, i);
            let horizon = dynamics.horizon();
            let mut states = Vec::with_capacity(horizon - t + 1);
            let mut controls = Vec::with_capacity(horizon - t);
            let mut cost = 0.0;
            let mut x = x_t.clone();
            for k in t..horizon {
                let u = reference.sample(k, &x, &mut rng);
                cost += costs.stage(k, &x, &u);
                let next = dynamics.step(k, &x, &u);
                states.push(x);
                controls.push(u);
                x = next;
            }
            cost += costs.terminal(&x);
            states.push(x);
            Trajectory::new_unchecked(t, states, controls, cost)
        })
        .collect();
    RolloutBatch {
        origin_time: t,
        origin_state: x_t.clone(),
        tail_costs: paths.iter().map(|p| p.path_cost()).collect(),
        paths,
    }
}

/// Exponentiated tail-cost weights `r_t(i)` with their prefix sums, which
/// realize the piecewise-constant selector `F_t`.
#[derive(Clone, Debug)]
pub struct WeightTable {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
    cost_shift: f64,
}

impl WeightTable {
    /// Builds weights `exp(-(C_i - min C)/lambda)` from raw tail costs.
    /// Infinite costs get weight exactly 0. Fails if every tail is
    /// forbidden (`t` is only used for error context, pass the batch time).
    pub fn from_tail_costs(tail_costs: &[f64], lambda: f64, t: usize) -> Result<Self, SamplerError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(SamplerError::InvalidLambda { lambda });
        }
        let mut shift = f64::INFINITY;
        for (index, &c) in tail_costs.iter().enumerate() {
            if c.is_nan() {
                return Err(SamplerError::NanTailCost { index });
            }
            shift = shift.min(c);
        }
        if !shift.is_finite() {
            return Err(SamplerError::NoAdmissibleRollout {
                t,
                n: tail_costs.len(),
            });
        }
        let mut weights = Vec::with_capacity(tail_costs.len());
        let mut cumulative = Vec::with_capacity(tail_costs.len());
        let mut acc = 0.0;
        for &c in tail_costs {
            let w = if c.is_finite() {
                (-(c - shift) / lambda).exp()
            } else {
                0.0
            };
            acc += w;
            weights.push(w);
            cumulative.push(acc);
        }
        Ok(WeightTable {
            weights,
            cumulative,
            total: acc,
            cost_shift: shift,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `r_t`, the sum of all weights. Positive by construction.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// The minimum tail cost subtracted before exponentiation.
    pub fn cost_shift(&self) -> f64 {
        self.cost_shift
    }

    /// `F_t(i) = sum_{k < i} r_t(k)` for `i` in `0..=len`; `F_t(0) = 0` and
    /// `F_t(len) = r_t` exactly (same accumulation order).
    pub fn cumulative_at(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.cumulative[i - 1]
        }
    }

    /// Probability that [`Self::inverse_cdf`] selects rollout `i`.
    pub fn selection_probability(&self, i: usize) -> f64 {
        self.weights[i] / self.total
    }

    /// `F_t^{-1}(d)`: the smallest index whose cumulative weight reaches
    /// `d`. A draw exactly on a step boundary resolves to the lower index;
    /// `d = 0` resolves to the first index with positive weight. Requires
    /// `0 <= d <= r_t`.
    pub fn inverse_cdf(&self, d: f64) -> usize {
        debug_assert!(d >= 0.0 && d <= self.total, "selection draw out of range");
        let mut i = self.cumulative.partition_point(|&c| c < d);
        // Only reachable for d = 0 ahead of leading zero weights; the total
        // being positive guarantees a positive weight exists to the right.
        while self.weights[i] == 0.0 {
            i += 1;
        }
        i
    }

    /// KL divergence of the selection distribution from the uniform
    /// distribution over the N sampled rollouts,
    /// `sum_i p_i ln(N p_i)` with `p_i = r_t(i)/r_t`. This is also the
    /// expected log-likelihood-ratio increment of the step given the batch.
    pub fn selection_kl_vs_uniform(&self) -> f64 {
        let n = self.weights.len() as f64;
        let mut kl = 0.0;
        for &w in &self.weights {
            if w > 0.0 {
                let p = w / self.total;
                kl += p * (n * p).ln();
            }
        }
        kl
    }
}

/// Weight table of a batch (Algorithm line "compute the exponentiated path
/// costs").
pub fn build_weight_table(batch: &RolloutBatch, lambda: f64) -> Result<WeightTable, SamplerError> {
    WeightTable::from_tail_costs(batch.tail_costs(), lambda, batch.origin_time())
}

fn draw_selection_point<R: Rng + ?Sized>(total: f64, rng: &mut R) -> f64 {
    rng.random_range(0.0..total)
}

/// Draws `d ~ unif[0, r_t]` from `rng` and returns the selected rollout
/// index together with its first control.
pub fn select_action<R: Rng + ?Sized>(
    table: &WeightTable,
    batch: &RolloutBatch,
    rng: &mut R,
) -> (usize, ControlVector) {
    debug_assert_eq!(table.len(), batch.len(), "table built from another batch");
    let d = draw_selection_point(table.total(), rng);
    let j = table.inverse_cdf(d);
    (j, batch.paths()[j].controls()[0].clone())
}

/// Evidence retained from one planning step, enough to reconstruct the
/// step's likelihood ratio later: the selected index `j_t`, its weight
/// `r_t(j_t)`, the batch total `r_t`, and the sample count N.
#[derive(Clone, Debug)]
pub struct SelectionStep {
    pub t: usize,
    pub selected: usize,
    pub selected_weight: f64,
    pub total_weight: f64,
    pub sample_count: usize,
    pub control: ControlVector,
    pub state: StateVector,
}

/// Per-step selection evidence for a full episode.
#[derive(Clone, Debug, Default)]
pub struct EpisodeRecord {
    pub steps: Vec<SelectionStep>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One full planning step at `(t, x_t)`: sample N tails, weight, select.
///
/// Equivalent to `rollout_batch` + `build_weight_table` + `select_action`
/// with the selection stream keyed `(episode, t)`, but never materializes
/// the tails: each rollout contributes only its first control and its tail
/// cost, so memory stays O(N) regardless of horizon.
pub fn deceptive_action<D, P, C>(
    dynamics: &D,
    reference: &P,
    costs: &C,
    t: usize,
    x_t: &StateVector,
    n: usize,
    lambda: f64,
    seed: EpisodeSeed,
) -> Result<(ControlVector, SelectionStep), SamplerError>
where
    D: DeterministicDynamics + Sync,
    P: StochasticPolicy + Sync,
    C: CostModel + Sync,
{
    assert!(n >= 1, "need at least one rollout");
    assert!(t < dynamics.horizon(), "planning step must precede the horizon");
    let summaries: Vec<(ControlVector, f64)> = (0..n)
        .into_par_iter()
        .with_min_len(PAR_MIN_CHUNK)
        .map(|i| {
            let mut rng = seed.rollout_rng(t, i);
            let horizon = dynamics.horizon();
            let mut x = x_t.clone();
            let mut cost = 0.0;
            let mut first: Option<ControlVector> = None;
            for k in t..horizon {
                let u = reference.sample(k, &x, &mut rng);
                cost += costs.stage(k, &x, &u);
                x = dynamics.step(k, &x, &u);
                if first.is_none() {
                    first = Some(u);
                }
            }
            cost += costs.terminal(&x);
            (first.expect("t < horizon guarantees one control"), cost)
        })
        .collect();
    let tail_costs: Vec<f64> = summaries.iter().map(|s| s.1).collect();
    let table = WeightTable::from_tail_costs(&tail_costs, lambda, t)?;
    let mut rng = seed.selection_rng(t);
    let d = draw_selection_point(table.total(), &mut rng);
    let j = table.inverse_cdf(d);
    let control = summaries[j].0.clone();
    let step = SelectionStep {
        t,
        selected: j,
        selected_weight: table.weights()[j],
        total_weight: table.total(),
        sample_count: n,
        control: control.clone(),
        state: x_t.clone(),
    };
    Ok((control, step))
}

/// Runs one closed-loop episode: a fresh batch of N rollouts is planned at
/// every `t`, the selected control applied through the true dynamics.
pub fn run_episode<D, P, C>(
    dynamics: &D,
    reference: &P,
    costs: &C,
    x0: &StateVector,
    n: usize,
    lambda: f64,
    seed: EpisodeSeed,
) -> Result<(Trajectory, EpisodeRecord), SamplerError>
where
    D: DeterministicDynamics + Sync,
    P: StochasticPolicy + Sync,
    C: CostModel + Sync,
{
    let horizon = dynamics.horizon();
    let mut controls = Vec::with_capacity(horizon);
    let mut record = EpisodeRecord {
        steps: Vec::with_capacity(horizon),
    };
    let mut x = x0.clone();
    for t in 0..horizon {
        let (u, step) = deceptive_action(dynamics, reference, costs, t, &x, n, lambda, seed)?;
        x = dynamics.step(t, &x, &u);
        controls.push(u);
        record.steps.push(step);
    }
    let trajectory = Trajectory::closed_loop(dynamics, costs, 0, x0.clone(), controls);
    Ok((trajectory, record))
}

/// Runs one closed-loop episode under the reference policy itself, using
/// the episode's dedicated reference stream.
pub fn reference_episode<D, P, C>(
    dynamics: &D,
    reference: &P,
    costs: &C,
    x0: &StateVector,
    seed: EpisodeSeed,
) -> Trajectory
where
    D: DeterministicDynamics,
    P: StochasticPolicy,
    C: CostModel,
{
    let horizon = dynamics.horizon();
    let mut rng = seed.reference_rng();
    let mut controls = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for t in 0..horizon {
        let u = reference.sample(t, &x, &mut rng);
        x = dynamics.step(t, &x, &u);
        controls.push(u);
    }
    Trajectory::closed_loop(dynamics, costs, 0, x0.clone(), controls)
}

/// Monte-Carlo estimate of the desirability function at the batch origin,
/// `Z_t(x_t) ~= (1/N) sum_i exp(-C_{t:T}(i)/lambda)`, evaluated in log
/// space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZEstimate {
    pub log_value: f64,
    pub value: f64,
}

/// Estimates `Z_t(x_t)` from a batch. A batch whose every tail is
/// forbidden estimates exactly zero (`log_value = -inf`) rather than
/// erroring: zero is the honest limit of the estimator.
pub fn estimate_z(batch: &RolloutBatch, lambda: f64) -> Result<ZEstimate, SamplerError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SamplerError::InvalidLambda { lambda });
    }
    let costs = batch.tail_costs();
    let mut shift = f64::INFINITY;
    for (index, &c) in costs.iter().enumerate() {
        if c.is_nan() {
            return Err(SamplerError::NanTailCost { index });
        }
        shift = shift.min(c);
    }
    if !shift.is_finite() {
        return Ok(ZEstimate {
            log_value: f64::NEG_INFINITY,
            value: 0.0,
        });
    }
    let sum: f64 = costs
        .iter()
        .filter(|c| c.is_finite())
        .map(|&c| (-(c - shift) / lambda).exp())
        .sum();
    let log_value = -shift / lambda + sum.ln() - (costs.len() as f64).ln();
    Ok(ZEstimate {
        log_value,
        value: log_value.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Covariance, GaussianPolicy, MeanFunction, MIN_VARIANCE};
    use approx::assert_relative_eq;

    struct Integrator {
        horizon: usize,
    }

    impl DeterministicDynamics for Integrator {
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn step(&self, _t: usize, x: &StateVector, u: &ControlVector) -> StateVector {
            StateVector::from([x[0] + u[0]])
        }
    }

    struct ZeroCost;

    impl CostModel for ZeroCost {
        fn stage(&self, _t: usize, _x: &StateVector, _u: &ControlVector) -> f64 {
            0.0
        }
        fn terminal(&self, _x: &StateVector) -> f64 {
            0.0
        }
    }

    /// Terminal cost proportional to the final state, used to dial in
    /// prescribed tail costs through the chosen controls.
    struct TerminalGain(f64);

    impl CostModel for TerminalGain {
        fn stage(&self, _t: usize, _x: &StateVector, _u: &ControlVector) -> f64 {
            0.0
        }
        fn terminal(&self, x: &StateVector) -> f64 {
            self.0 * x[0]
        }
    }

    struct DriftMean;

    impl MeanFunction for DriftMean {
        fn mean(&self, _t: usize, x: &StateVector) -> ControlVector {
            ControlVector::from([-0.2 * x[0]])
        }
    }

    fn gaussian_1d(sigma2: f64) -> GaussianPolicy<DriftMean> {
        GaussianPolicy::new(DriftMean, Covariance::isotropic(1, sigma2).unwrap())
    }

    fn seed(master: u64, episode: u64) -> EpisodeSeed {
        EpisodeSeed::new(SeedLineage::new(master), episode)
    }

    #[test]
    fn equal_costs_weight_uniformly() {
        let table = WeightTable::from_tail_costs(&[7.5; 4], 2.0, 0).unwrap();
        for i in 0..4 {
            assert_eq!(table.weights()[i], 1.0);
            assert_relative_eq!(table.selection_probability(i), 0.25);
        }
        assert_eq!(table.cumulative_at(0), 0.0);
        assert_eq!(table.cumulative_at(4), table.total());
    }

    #[test]
    fn two_cost_table_matches_softmax() {
        for lambda in [0.25, 1.0, 7.0] {
            let table =
                WeightTable::from_tail_costs(&[0.0, lambda * 3.0_f64.ln()], lambda, 0).unwrap();
            assert_relative_eq!(table.selection_probability(0), 0.75, max_relative = 1e-12);
            assert_relative_eq!(table.selection_probability(1), 0.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn forbidden_tail_gets_zero_weight() {
        let table = WeightTable::from_tail_costs(&[0.0, f64::INFINITY], 1.0, 0).unwrap();
        assert_eq!(table.selection_probability(0), 1.0);
        assert_eq!(table.selection_probability(1), 0.0);
    }

    #[test]
    fn all_forbidden_is_an_error() {
        let err = WeightTable::from_tail_costs(&[f64::INFINITY; 3], 1.0, 4).unwrap_err();
        assert!(matches!(
            err,
            SamplerError::NoAdmissibleRollout { t: 4, n: 3 }
        ));
    }

    #[test]
    fn nonpositive_lambda_is_rejected() {
        assert!(matches!(
            WeightTable::from_tail_costs(&[0.0], 0.0, 0),
            Err(SamplerError::InvalidLambda { .. })
        ));
        assert!(matches!(
            WeightTable::from_tail_costs(&[0.0], -1.0, 0),
            Err(SamplerError::InvalidLambda { .. })
        ));
    }

    #[test]
    fn shift_leaves_selection_ratios_unchanged() {
        // costs small enough that the unshifted exponentials are exact
        let costs = [1.25, 0.5, 3.0, 0.75];
        let lambda = 0.8;
        let table = WeightTable::from_tail_costs(&costs, lambda, 0).unwrap();
        let raw: Vec<f64> = costs.iter().map(|c| (-c / lambda).exp()).collect();
        let raw_total: f64 = raw.iter().sum();
        for i in 0..costs.len() {
            assert_relative_eq!(
                table.selection_probability(i),
                raw[i] / raw_total,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn shift_keeps_huge_costs_selectable() {
        // raw exp(-c/lambda) underflows for both entries; the shifted table
        // still separates them correctly
        let table = WeightTable::from_tail_costs(&[5000.0, 5000.0 + 3.0_f64.ln()], 1.0, 0).unwrap();
        assert_relative_eq!(table.selection_probability(0), 0.75, max_relative = 1e-12);
    }

    #[test]
    fn inverse_cdf_steps_and_boundaries() {
        let table = WeightTable::from_tail_costs(&[0.0, 0.0], 1.0, 0).unwrap(); // weights [1, 1]
        assert_eq!(table.inverse_cdf(0.5), 0);
        assert_eq!(table.inverse_cdf(1.5), 1);
        // boundary draws resolve to the lower index
        assert_eq!(table.inverse_cdf(1.0), 0);
        assert_eq!(table.inverse_cdf(2.0), 1);

        let lambda = 1.0;
        let table =
            WeightTable::from_tail_costs(&[0.0, lambda * 3.0_f64.ln()], lambda, 0).unwrap(); // weights [3/4-scale: 1, 1/3]
        let d = 2.0 / 3.0 * table.total();
        assert_eq!(table.inverse_cdf(d), 0);
    }

    #[test]
    fn zero_draw_skips_leading_forbidden_rollouts() {
        let table = WeightTable::from_tail_costs(&[f64::INFINITY, 1.0, 2.0], 1.0, 0).unwrap();
        assert_eq!(table.inverse_cdf(0.0), 1);
    }

    #[test]
    fn selection_frequencies_concentrate() {
        use rand::SeedableRng;
        let lambda = 2.0;
        let table =
            WeightTable::from_tail_costs(&[0.0, lambda * 3.0_f64.ln()], lambda, 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        let mut first = 0u64;
        for _ in 0..draws {
            if table.inverse_cdf(draw_selection_point(table.total(), &mut rng)) == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 0.002, "freq = {freq}");
    }

    #[test]
    fn selection_kl_vanishes_for_uniform_weights() {
        let table = WeightTable::from_tail_costs(&[3.0; 8], 1.0, 0).unwrap();
        assert!(table.selection_kl_vs_uniform().abs() < 1e-15);
        let skewed = WeightTable::from_tail_costs(&[0.0, 3.0_f64.ln()], 1.0, 0).unwrap();
        // sum p ln(2p) for p = (3/4, 1/4)
        let expected = 0.75 * (1.5_f64).ln() + 0.25 * (0.5_f64).ln();
        assert_relative_eq!(skewed.selection_kl_vs_uniform(), expected, epsilon = 1e-15);
    }

    #[test]
    fn single_rollout_with_tiny_noise_is_the_mean_path() {
        let dynamics = Integrator { horizon: 5 };
        let policy = gaussian_1d(MIN_VARIANCE);
        let batch = rollout_batch(&dynamics, &policy, &ZeroCost, 0, &StateVector::from([1.0]), 1, seed(0, 0));
        assert_eq!(batch.len(), 1);
        // mean controller u = -0.2 x contracts toward zero
        let mut x = 1.0;
        for (k, s) in batch.paths()[0].states().iter().enumerate() {
            assert!((s[0] - x).abs() < 1e-4, "state {k} drifted: {} vs {x}", s[0]);
            x += -0.2 * x;
        }
    }

    #[test]
    fn batches_are_bitwise_reproducible() {
        let dynamics = Integrator { horizon: 6 };
        let policy = gaussian_1d(0.5);
        let x0 = StateVector::from([0.3]);
        let a = rollout_batch(&dynamics, &policy, &ZeroCost, 1, &x0, 128, seed(9, 2));
        let b = rollout_batch(&dynamics, &policy, &ZeroCost, 1, &x0, 128, seed(9, 2));
        assert_eq!(a.paths(), b.paths());
        assert_eq!(a.tail_costs(), b.tail_costs());
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let dynamics = Integrator { horizon: 8 };
        let policy = gaussian_1d(0.4);
        let x0 = StateVector::from([-0.7]);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                deceptive_action(
                    &dynamics,
                    &policy,
                    &TerminalGain(2.0),
                    0,
                    &x0,
                    4096,
                    0.7,
                    seed(77, 5),
                )
                .unwrap()
            })
        };
        let (u1, s1) = run(1);
        let (u3, s3) = run(3);
        assert_eq!(u1, u3);
        assert_eq!(s1.selected, s3.selected);
        assert_eq!(s1.selected_weight.to_bits(), s3.selected_weight.to_bits());
        assert_eq!(s1.total_weight.to_bits(), s3.total_weight.to_bits());
    }

    #[test]
    fn streaming_step_equals_batch_composition() {
        let dynamics = Integrator { horizon: 7 };
        let policy = gaussian_1d(0.6);
        let costs = TerminalGain(1.3);
        let x0 = StateVector::from([0.2]);
        let (n, lambda, sd) = (512, 0.9, seed(1234, 3));
        for t in 0..dynamics.horizon() {
            let (u_stream, step) =
                deceptive_action(&dynamics, &policy, &costs, t, &x0, n, lambda, sd).unwrap();
            let batch = rollout_batch(&dynamics, &policy, &costs, t, &x0, n, sd);
            let table = build_weight_table(&batch, lambda).unwrap();
            let (j, u_batch) = select_action(&table, &batch, &mut sd.selection_rng(t));
            assert_eq!(step.selected, j);
            assert_eq!(u_stream, u_batch);
            assert_eq!(step.total_weight.to_bits(), table.total().to_bits());
        }
    }

    #[test]
    fn zero_horizon_episode_is_a_point() {
        let dynamics = Integrator { horizon: 0 };
        let policy = gaussian_1d(0.5);
        let (traj, record) = run_episode(
            &dynamics,
            &policy,
            &ZeroCost,
            &StateVector::from([4.0]),
            16,
            1.0,
            seed(0, 0),
        )
        .unwrap();
        assert_eq!(traj.states().len(), 1);
        assert!(traj.controls().is_empty());
        assert!(record.is_empty());
    }

    #[test]
    fn zero_cost_episodes_match_reference_statistics() {
        // with C = 0 all weights are equal, so the selected action is a
        // uniformly chosen reference sample: the closed loop is R itself
        let dynamics = Integrator { horizon: 4 };
        let policy = gaussian_1d(0.5);
        let x0 = StateVector::from([0.0]);
        let lineage = SeedLineage::new(31);
        let episodes = 600;
        let (mut dec_sum, mut dec_sumsq) = (0.0, 0.0);
        let (mut ref_sum, mut ref_sumsq) = (0.0, 0.0);
        for e in 0..episodes {
            let sd = EpisodeSeed::new(lineage, e);
            let (traj, _) =
                run_episode(&dynamics, &policy, &ZeroCost, &x0, 32, 1.0, sd).unwrap();
            let v = traj.final_state()[0];
            dec_sum += v;
            dec_sumsq += v * v;
            let traj = reference_episode(&dynamics, &policy, &ZeroCost, &x0, sd);
            let v = traj.final_state()[0];
            ref_sum += v;
            ref_sumsq += v * v;
        }
        let m = episodes as f64;
        let dec_mean = dec_sum / m;
        let ref_mean = ref_sum / m;
        let dec_var = dec_sumsq / m - dec_mean * dec_mean;
        let ref_var = ref_sumsq / m - ref_mean * ref_mean;
        let se = ((dec_var + ref_var) / m).sqrt();
        assert!(
            (dec_mean - ref_mean).abs() < 2.0 * se,
            "means {dec_mean} vs {ref_mean}, se {se}"
        );
        assert!((dec_var / ref_var - 1.0).abs() < 0.25);
    }

    #[test]
    fn estimate_z_zero_cost_is_exactly_one() {
        let dynamics = Integrator { horizon: 3 };
        let policy = gaussian_1d(0.5);
        let batch = rollout_batch(&dynamics, &policy, &ZeroCost, 0, &StateVector::from([0.0]), 64, seed(2, 0));
        let z = estimate_z(&batch, 1.0).unwrap();
        assert_eq!(z.value, 1.0);
        assert_eq!(z.log_value, 0.0);
    }

    #[test]
    fn estimate_z_two_tail_average() {
        // controls 0 and 1 under an integrator with terminal gain lambda
        // give tail costs {0, lambda}
        let dynamics = Integrator { horizon: 1 };
        let lambda = 0.7;
        let costs = TerminalGain(lambda);
        let x0 = StateVector::from([0.0]);
        let paths = vec![
            Trajectory::closed_loop(&dynamics, &costs, 0, x0.clone(), vec![ControlVector::from([0.0])]),
            Trajectory::closed_loop(&dynamics, &costs, 0, x0.clone(), vec![ControlVector::from([1.0])]),
        ];
        let batch = RolloutBatch::new(0, x0, paths);
        let z = estimate_z(&batch, lambda).unwrap();
        assert_relative_eq!(z.value, (1.0 + (-1.0_f64).exp()) / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn estimate_z_all_forbidden_is_zero() {
        let dynamics = Integrator { horizon: 1 };
        struct Wall;
        impl CostModel for Wall {
            fn stage(&self, _t: usize, _x: &StateVector, _u: &ControlVector) -> f64 {
                f64::INFINITY
            }
            fn terminal(&self, _x: &StateVector) -> f64 {
                0.0
            }
        }
        let x0 = StateVector::from([0.0]);
        let paths = vec![Trajectory::closed_loop(
            &dynamics,
            &Wall,
            0,
            x0.clone(),
            vec![ControlVector::from([0.0])],
        )];
        let batch = RolloutBatch::new(0, x0, paths);
        let z = estimate_z(&batch, 1.0).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.log_value.is_infinite() && z.log_value < 0.0);
    }

    #[test]
    fn z_estimate_error_scales_as_inverse_sqrt_n() {
        // log-log slope of the Z-estimate standard error vs N should sit
        // near -1/2
        let dynamics = Integrator { horizon: 4 };
        let policy = gaussian_1d(0.5);
        let costs = TerminalGain(0.8);
        let x0 = StateVector::from([0.0]);
        let lambda = 1.0;
        let lineage = SeedLineage::new(99);
        let ns = [32usize, 128, 512, 2048];
        let mut log_se = Vec::new();
        for (slot, &n) in ns.iter().enumerate() {
            let reps = 160;
            let mut vals = Vec::with_capacity(reps);
            for r in 0..reps {
                let sd = EpisodeSeed::new(lineage, (slot * reps + r) as u64);
                let batch = rollout_batch(&dynamics, &policy, &costs, 0, &x0, n, sd);
                vals.push(estimate_z(&batch, lambda).unwrap().value);
            }
            let mean: f64 = vals.iter().sum::<f64>() / reps as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64;
            log_se.push(var.sqrt().ln());
        }
        // least-squares slope over (ln n, ln se)
        let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = log_se.iter().sum::<f64>() / log_se.len() as f64;
        let slope = xs
            .iter()
            .zip(&log_se)
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
        assert!(
            (slope + 0.5).abs() < 0.1,
            "standard-error slope {slope}, expected near -0.5"
        );
    }
}

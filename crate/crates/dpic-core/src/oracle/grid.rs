//! Backward value recursion on a dense grid.
//!
//! For low-dimensional continuous problems the integral in the value
//! recursion is replaced by quadrature over a uniform control grid and the
//! continuation value is looked up by multilinear interpolation on a state
//! grid:
//!
//! ```text
//!     J_t(x) ~= -lambda ln sum_u R_t(u|x) du exp(-(C_t(x,u) + J_{t+1}(F_t(x,u)))/lambda)
//! ```
//!
//! This is a second, sampling-free approximation of the same recursion the
//! Monte-Carlo machinery targets, so the two can be cross-checked. Cost
//! grows exponentially in dimension; intended for 1-D and 2-D instances.

use super::finite::OracleError;
use crate::model::{ControlVector, CostModel, DeterministicDynamics, StateVector, StochasticPolicy};

/// Uniformly spaced closed interval with `points` nodes (at least 2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, points: usize) -> Self {
        assert!(points >= 2, "axis needs at least 2 nodes");
        assert!(max > min && min.is_finite() && max.is_finite(), "bad axis range");
        GridAxis { min, max, points }
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        debug_assert!(i < self.points);
        self.min + self.spacing() * i as f64
    }

    /// Cell index and fractional offset such that
    /// `v ~= (1-w) coord(i) + w coord(i+1)`, `i <= points-2`.
    /// The boolean reports whether `v` had to be clamped.
    fn locate(&self, v: f64) -> (usize, f64, bool) {
        if v <= self.min {
            return (0, 0.0, v < self.min);
        }
        if v >= self.max {
            return (self.points - 2, 1.0, v > self.max);
        }
        let s = (v - self.min) / self.spacing();
        let mut i = s as usize;
        if i > self.points - 2 {
            i = self.points - 2;
        }
        (i, s - i as f64, false)
    }
}

/// What to do when a successor state leaves the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutOfBounds {
    /// Evaluate at the nearest grid point and count the event.
    Clamp,
    /// Fail the whole solve.
    Error,
}

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub state: Vec<GridAxis>,
    pub control: Vec<GridAxis>,
    pub out_of_bounds: OutOfBounds,
}

fn node_count(axes: &[GridAxis]) -> usize {
    axes.iter().map(|a| a.points).product()
}

fn unflatten(axes: &[GridAxis], mut flat: usize, out: &mut [usize]) {
    for (k, axis) in axes.iter().enumerate().rev() {
        out[k] = flat % axis.points;
        flat /= axis.points;
    }
}

impl GridSpec {
    pub fn n_state_nodes(&self) -> usize {
        node_count(&self.state)
    }

    pub fn n_control_nodes(&self) -> usize {
        node_count(&self.control)
    }

    pub fn state_node(&self, flat: usize) -> StateVector {
        let mut idx = vec![0usize; self.state.len()];
        unflatten(&self.state, flat, &mut idx);
        let coords: Vec<f64> = idx.iter().zip(&self.state).map(|(&i, a)| a.coord(i)).collect();
        StateVector::new(&coords)
    }

    pub fn control_node(&self, flat: usize) -> ControlVector {
        let mut idx = vec![0usize; self.control.len()];
        unflatten(&self.control, flat, &mut idx);
        let coords: Vec<f64> = idx.iter().zip(&self.control).map(|(&i, a)| a.coord(i)).collect();
        ControlVector::new(&coords)
    }

    pub fn state_flat(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.state.len());
        let mut flat = 0;
        for (k, axis) in self.state.iter().enumerate() {
            assert!(idx[k] < axis.points);
            flat = flat * axis.points + idx[k];
        }
        flat
    }

    /// Log of the control cell volume, the quadrature weight attached to
    /// every control node.
    fn log_cell(&self) -> f64 {
        self.control.iter().map(|a| a.spacing().ln()).sum()
    }
}

/// Value tables on the state grid, one per time step.
#[derive(Clone, Debug)]
pub struct GridSolution {
    spec: GridSpec,
    lambda: f64,
    /// `value[t][flat_state]`, `t` in `0..=horizon`.
    pub value: Vec<Vec<f64>>,
    clamp_events: u64,
}

/// Multilinear interpolation of `table` at `coords`. Corners carrying zero
/// weight are skipped so an infinite node only poisons points that actually
/// lean on it.
fn interpolate(
    axes: &[GridAxis],
    table: &[f64],
    coords: &[f64],
) -> (f64, bool) {
    let d = axes.len();
    debug_assert_eq!(coords.len(), d);
    debug_assert!(d <= 4, "grid interpolation supports up to 4 dimensions");
    let mut base = [0usize; 4];
    let mut frac = [0.0f64; 4];
    let mut clamped = false;
    for k in 0..d {
        let (i, w, c) = axes[k].locate(coords[k]);
        base[k] = i;
        frac[k] = w;
        clamped |= c;
    }
    let mut acc = 0.0;
    for mask in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut flat = 0;
        for k in 0..d {
            let hi = (mask >> k) & 1 == 1;
            weight *= if hi { frac[k] } else { 1.0 - frac[k] };
            flat = flat * axes[k].points + base[k] + usize::from(hi);
        }
        if weight > 0.0 {
            acc += weight * table[flat];
        }
    }
    (acc, clamped)
}

impl GridSolution {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn horizon(&self) -> usize {
        self.value.len() - 1
    }

    pub fn node_value(&self, t: usize, idx: &[usize]) -> f64 {
        self.value[t][self.spec.state_flat(idx)]
    }

    /// Interpolated value at an arbitrary state.
    pub fn value_at(&self, t: usize, coords: &[f64]) -> Result<f64, OracleError> {
        assert_eq!(coords.len(), self.spec.state.len());
        let (v, clamped) = interpolate(&self.spec.state, &self.value[t], coords);
        if clamped && self.spec.out_of_bounds == OutOfBounds::Error {
            return Err(OracleError::GridOutOfBounds {
                t,
                details: format!("query {coords:?} outside the state grid"),
            });
        }
        Ok(v)
    }

    /// Number of successor states that left the grid during the solve
    /// (only nonzero in `Clamp` mode).
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }
}

struct StageScores {
    scores: Vec<f64>,
    clamp_events: u64,
}

/// Quadrature scores `ln R + ln du - (C + J_{t+1}(F))/lambda` for every
/// control node at state `x`.
fn stage_scores<D, P, C>(
    dynamics: &D,
    reference: &P,
    costs: &C,
    spec: &GridSpec,
    next_value: &[f64],
    lambda: f64,
    t: usize,
    x: &StateVector,
) -> Result<StageScores, OracleError>
where
    D: DeterministicDynamics,
    P: StochasticPolicy,
    C: CostModel,
{
    let log_cell = spec.log_cell();
    let nc = spec.n_control_nodes();
    let mut scores = Vec::with_capacity(nc);
    let mut clamp_events = 0;
    for cu in 0..nc {
        let u = spec.control_node(cu);
        let Some(log_r) = reference.log_density(t, x, &u) else {
            return Err(OracleError::DensityRequired { t });
        };
        let c = costs.stage(t, x, &u);
        if !c.is_finite() || log_r == f64::NEG_INFINITY {
            scores.push(f64::NEG_INFINITY);
            continue;
        }
        let xn = dynamics.step(t, x, &u);
        let (jn, clamped) = interpolate(&spec.state, next_value, xn.coords());
        if clamped {
            if spec.out_of_bounds == OutOfBounds::Error {
                return Err(OracleError::GridOutOfBounds {
                    t,
                    details: format!("successor {:?} outside the state grid", xn.coords()),
                });
            }
            clamp_events += 1;
        }
        scores.push(if jn.is_finite() {
            log_r + log_cell - (c + jn) / lambda
        } else {
            f64::NEG_INFINITY
        });
    }
    Ok(StageScores {
        scores,
        clamp_events,
    })
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Solves the value recursion by grid quadrature.
pub fn grid_dp<D, P, C>(
    dynamics: &D,
    reference: &P,
    costs: &C,
    spec: &GridSpec,
    lambda: f64,
) -> Result<GridSolution, OracleError>
where
    D: DeterministicDynamics,
    P: StochasticPolicy,
    C: CostModel,
{
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(OracleError::InvalidLambda(lambda));
    }
    assert_eq!(spec.state.len(), dynamics.state_dim(), "state grid dimension");
    assert_eq!(spec.control.len(), dynamics.control_dim(), "control grid dimension");
    assert!(spec.state.len() <= 4 && spec.control.len() <= 4);
    let t_max = dynamics.horizon();
    let ns = spec.n_state_nodes();
    let mut value = vec![vec![0.0; ns]; t_max + 1];
    for flat in 0..ns {
        value[t_max][flat] = costs.terminal(&spec.state_node(flat));
    }
    let mut clamp_events = 0;
    for t in (0..t_max).rev() {
        let (head, tail) = value.split_at_mut(t + 1);
        let next_value = &tail[0];
        for flat in 0..ns {
            let x = spec.state_node(flat);
            let stage = stage_scores(
                dynamics, reference, costs, spec, next_value, lambda, t, &x,
            )?;
            clamp_events += stage.clamp_events;
            head[t][flat] = -lambda * log_sum_exp(&stage.scores);
        }
    }
    Ok(GridSolution {
        spec: spec.clone(),
        lambda,
        value,
        clamp_events,
    })
}

/// Softmax policy over the control nodes at a given state node, recomputed
/// from the stored value tables. Masses sum to 1.
pub fn grid_policy<D, P, C>(
    dynamics: &D,
    reference: &P,
    costs: &C,
    solution: &GridSolution,
    t: usize,
    state_idx: &[usize],
) -> Result<Vec<f64>, OracleError>
where
    D: DeterministicDynamics,
    P: StochasticPolicy,
    C: CostModel,
{
    assert!(t < solution.horizon(), "no policy at the terminal time");
    let spec = solution.spec();
    let x = spec.state_node(spec.state_flat(state_idx));
    let stage = stage_scores(
        dynamics,
        reference,
        costs,
        spec,
        &solution.value[t + 1],
        solution.lambda,
        t,
        &x,
    )?;
    let lse = log_sum_exp(&stage.scores);
    if lse == f64::NEG_INFINITY {
        return Err(OracleError::InfeasibleState {
            t,
            x: spec.state_flat(state_idx),
        });
    }
    Ok(stage
        .scores
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - lse).exp()
            }
        })
        .collect())
}

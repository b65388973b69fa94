//! Core abstractions: deterministic dynamics, stochastic policies, additive
//! path costs, and trajectories.
//!
//! The planning problem is posed on a finite horizon `t = 0..T` with
//! deterministic transitions `x_{t+1} = F_t(x_t, u_t)` and a stochastic
//! reference policy `R(du_t | x_t)`. Path cost is stage-additive,
//!
//! ```text
//!     C_{t:T} = sum_{k=t}^{T-1} C_k(x_k, u_k) + C_T(x_T),
//! ```
//!
//! with `+inf` allowed as a stage or terminal value to mark a path as
//! forbidden (it receives zero weight downstream).

use rand::Rng;
use smallvec::SmallVec;
use thiserror::Error;

/// Stage and terminal costs may be `+inf` ("path excluded") but never NaN.
pub const FORBIDDEN: f64 = f64::INFINITY;

/// Smallest admissible variance on a covariance diagonal. Degenerate
/// (exactly zero) covariances are rejected; use this floor to get an
/// effectively deterministic policy.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("time index {t} out of range for horizon {horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },
    #[error("covariance is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("trajectory inconsistent with dynamics at step {t}")]
    InconsistentTrajectory { t: usize },
    #[error("trajectory has {states} states and {controls} controls; expected one more state than controls")]
    MalformedTrajectory { states: usize, controls: usize },
    #[error("cost value at step {t} is NaN")]
    NanCost { t: usize },
}

/// State vector `x_t`. Dimension is fixed per scenario and constant in `t`.
///
/// Stored inline for up to four coordinates, which covers the unicycle
/// state (px, py, s, theta) without heap traffic in rollout loops.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    coords: SmallVec<[f64; 4]>,
}

/// Control vector `u_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    coords: SmallVec<[f64; 2]>,
}

macro_rules! vector_impl {
    ($name:ident) => {
        impl $name {
            pub fn new(coords: &[f64]) -> Self {
                Self {
                    coords: SmallVec::from_slice(coords),
                }
            }

            pub fn zeros(dim: usize) -> Self {
                Self {
                    coords: smallvec::smallvec![0.0; dim],
                }
            }

            pub fn dim(&self) -> usize {
                self.coords.len()
            }

            pub fn coords(&self) -> &[f64] {
                &self.coords
            }
        }

        impl<const N: usize> From<[f64; N]> for $name {
            fn from(coords: [f64; N]) -> Self {
                Self::new(&coords)
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.coords[i]
            }
        }
    };
}

vector_impl!(StateVector);
vector_impl!(ControlVector);

/// Deterministic discrete-time transition map `x_{t+1} = F_t(x_t, u_t)` on a
/// finite horizon.
///
/// `step` must be a pure function of `(t, x, u)`: the sampler relies on
/// replaying a control sequence reproducing the same states bit for bit.
pub trait DeterministicDynamics {
    /// Horizon `T`. Controls are applied at `t = 0..T-1`.
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, t: usize, x: &StateVector, u: &ControlVector) -> StateVector;
}

/// Stochastic control kernel `R(du_t | x_t)`: sampleable, and carrying a
/// log-density when the kernel admits one.
pub trait StochasticPolicy {
    fn control_dim(&self) -> usize;

    /// Draws `u ~ R(. | x_t)` from the given stream. Consuming the same
    /// stream state must yield the same control.
    fn sample<R: Rng + ?Sized>(&self, t: usize, x: &StateVector, rng: &mut R) -> ControlVector;

    /// Natural-log density of `u` under `R(. | x_t)`, or `None` when the
    /// policy has no density (e.g. discrete kernels report mass elsewhere).
    fn log_density(&self, t: usize, x: &StateVector, u: &ControlVector) -> Option<f64>;
}

/// Stage-additive cost model. Stage costs are charged at `t = 0..T-1`, the
/// terminal cost at `t = T`. Values may be `+inf`, never NaN.
pub trait CostModel {
    fn stage(&self, t: usize, x: &StateVector, u: &ControlVector) -> f64;
    fn terminal(&self, x: &StateVector) -> f64;
}

/// Checked single transition. The trait method is the unchecked hot path;
/// this entry point validates dimensions and the time index.
pub fn step<D: DeterministicDynamics>(
    dynamics: &D,
    t: usize,
    x: &StateVector,
    u: &ControlVector,
) -> Result<StateVector, ModelError> {
    if x.dim() != dynamics.state_dim() {
        return Err(ModelError::DimensionMismatch {
            what: "state",
            expected: dynamics.state_dim(),
            got: x.dim(),
        });
    }
    if u.dim() != dynamics.control_dim() {
        return Err(ModelError::DimensionMismatch {
            what: "control",
            expected: dynamics.control_dim(),
            got: u.dim(),
        });
    }
    if t >= dynamics.horizon() {
        return Err(ModelError::TimeOutOfRange {
            t,
            horizon: dynamics.horizon(),
        });
    }
    Ok(dynamics.step(t, x, u))
}

/// Draws one control from the reference policy. Thin checked wrapper kept
/// for symmetry with [`step`]; reproducibility is inherited from the stream.
pub fn sample_reference<P: StochasticPolicy, R: Rng + ?Sized>(
    policy: &P,
    t: usize,
    x: &StateVector,
    rng: &mut R,
) -> ControlVector {
    policy.sample(t, x, rng)
}

/// One complete state-action path `x_{t0:T}, u_{t0:T-1}` together with its
/// tail cost `C_{t0:T}`.
///
/// A trajectory always extends to the horizon: `states.len() == T - t0 + 1`.
/// Paths are built by stepping the dynamics, so stored states are consistent
/// with the controls by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    start_time: usize,
    states: Vec<StateVector>,
    controls: Vec<ControlVector>,
    path_cost: f64,
}

impl Trajectory {
    /// Rolls the dynamics forward from `(start_time, x0)` under the given
    /// control sequence and accumulates the tail cost.
    pub fn closed_loop<D: DeterministicDynamics, C: CostModel>(
        dynamics: &D,
        costs: &C,
        start_time: usize,
        x0: StateVector,
        controls: Vec<ControlVector>,
    ) -> Self {
        debug_assert_eq!(start_time + controls.len(), dynamics.horizon());
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut cost = 0.0;
        let mut x = x0;
        for (k, u) in controls.iter().enumerate() {
            let t = start_time + k;
            cost += costs.stage(t, &x, u);
            let next = dynamics.step(t, &x, u);
            states.push(x);
            x = next;
        }
        cost += costs.terminal(&x);
        states.push(x);
        Trajectory {
            start_time,
            states,
            controls,
            path_cost: cost,
        }
    }

    /// Assembles a trajectory whose consistency is already guaranteed by
    /// the caller having produced `states` by stepping the dynamics.
    pub(crate) fn new_unchecked(
        start_time: usize,
        states: Vec<StateVector>,
        controls: Vec<ControlVector>,
        path_cost: f64,
    ) -> Self {
        debug_assert_eq!(states.len(), controls.len() + 1);
        Trajectory {
            start_time,
            states,
            controls,
            path_cost,
        }
    }

    /// Builds a trajectory from stored parts, validating dynamics
    /// consistency (bitwise) and recomputing the path cost.
    pub fn from_parts<D: DeterministicDynamics, C: CostModel>(
        dynamics: &D,
        costs: &C,
        start_time: usize,
        states: Vec<StateVector>,
        controls: Vec<ControlVector>,
    ) -> Result<Self, ModelError> {
        if states.len() != controls.len() + 1 {
            return Err(ModelError::MalformedTrajectory {
                states: states.len(),
                controls: controls.len(),
            });
        }
        for (k, u) in controls.iter().enumerate() {
            let t = start_time + k;
            if dynamics.step(t, &states[k], u) != states[k + 1] {
                return Err(ModelError::InconsistentTrajectory { t });
            }
        }
        let mut traj = Trajectory {
            start_time,
            states,
            controls,
            path_cost: 0.0,
        };
        traj.path_cost = traj.cost_from(costs, start_time);
        if traj.path_cost.is_nan() {
            return Err(ModelError::NanCost { t: start_time });
        }
        Ok(traj)
    }

    pub fn start_time(&self) -> usize {
        self.start_time
    }

    /// All states `x_{t0..=T}`, indexed relative to `start_time`.
    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn controls(&self) -> &[ControlVector] {
        &self.controls
    }

    /// State at absolute time `t` (so `state(start_time)` is the first one).
    pub fn state(&self, t: usize) -> &StateVector {
        &self.states[t - self.start_time]
    }

    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Cached tail cost `C_{t0:T}` accumulated at construction.
    pub fn path_cost(&self) -> f64 {
        self.path_cost
    }

    /// Tail cost `C_{t:T}` recomputed from any start index `t >= t0`.
    pub fn cost_from<C: CostModel>(&self, costs: &C, t: usize) -> f64 {
        assert!(t >= self.start_time, "tail start before trajectory start");
        let skip = t - self.start_time;
        let mut total = 0.0;
        for (k, u) in self.controls.iter().enumerate().skip(skip) {
            total += costs.stage(self.start_time + k, &self.states[k], u);
        }
        total + costs.terminal(self.final_state())
    }
}

/// Full path cost of a trajectory, recomputed from its parts.
pub fn path_cost<C: CostModel>(costs: &C, traj: &Trajectory) -> f64 {
    traj.cost_from(costs, traj.start_time())
}

/// Symmetric positive definite covariance with a cached Cholesky factor
/// `M = L L^T`, used both to sample (`mean + L z`) and to evaluate Gaussian
/// log-densities.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    dim: usize,
    matrix: Vec<f64>,
    lower: Vec<f64>,
    log_det: f64,
}

impl Covariance {
    /// `matrix` is row-major `dim x dim`. Fails unless symmetric with all
    /// diagonal entries at least [`MIN_VARIANCE`] and positive Cholesky
    /// pivots.
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self, ModelError> {
        if matrix.len() != dim * dim {
            return Err(ModelError::DimensionMismatch {
                what: "covariance matrix",
                expected: dim * dim,
                got: matrix.len(),
            });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = matrix[i * dim + j];
                let b = matrix[j * dim + i];
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(ModelError::NotPositiveDefinite(format!(
                        "asymmetric entries ({i},{j})"
                    )));
                }
            }
            if matrix[i * dim + i] < MIN_VARIANCE {
                return Err(ModelError::NotPositiveDefinite(format!(
                    "diagonal entry {i} below minimum variance {MIN_VARIANCE:e}"
                )));
            }
        }
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = matrix[i * dim + j];
                for k in 0..j {
                    sum -= lower[i * dim + k] * lower[j * dim + k];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(ModelError::NotPositiveDefinite(format!(
                            "nonpositive pivot at column {j}"
                        )));
                    }
                    lower[i * dim + j] = sum.sqrt();
                } else {
                    lower[i * dim + j] = sum / lower[j * dim + j];
                }
            }
        }
        let log_det = 2.0 * (0..dim).map(|i| lower[i * dim + i].ln()).sum::<f64>();
        Ok(Covariance {
            dim,
            matrix,
            lower,
            log_det,
        })
    }

    /// `sigma2 * I`.
    pub fn isotropic(dim: usize, sigma2: f64) -> Result<Self, ModelError> {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = sigma2;
        }
        Self::new(dim, m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Draws `L z` with `z ~ N(0, I)` into `out` (added onto the mean that
    /// is already there).
    pub fn add_sample_offset<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        debug_assert_eq!(out.len(), self.dim);
        let mut z: SmallVec<[f64; 2]> = SmallVec::with_capacity(self.dim);
        for _ in 0..self.dim {
            z.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
        for i in 0..self.dim {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += self.lower[i * self.dim + k] * z[k];
            }
            out[i] += acc;
        }
    }

    /// Quadratic form `v^T M^{-1} v` via one forward substitution.
    pub fn quad_form_inv(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        let mut y: SmallVec<[f64; 2]> = SmallVec::with_capacity(self.dim);
        for i in 0..self.dim {
            let mut sum = v[i];
            for k in 0..i {
                sum -= self.lower[i * self.dim + k] * y[k];
            }
            y.push(sum / self.lower[i * self.dim + i]);
        }
        y.iter().map(|a| a * a).sum()
    }
}

/// State- and time-dependent mean of a Gaussian policy.
pub trait MeanFunction {
    fn mean(&self, t: usize, x: &StateVector) -> ControlVector;
}

impl<F: Fn(usize, &StateVector) -> ControlVector> MeanFunction for F {
    fn mean(&self, t: usize, x: &StateVector) -> ControlVector {
        self(t, x)
    }
}

/// Fixed-mean convenience wrapper.
#[derive(Clone, Debug)]
pub struct ConstantMean(pub ControlVector);

impl MeanFunction for ConstantMean {
    fn mean(&self, _t: usize, _x: &StateVector) -> ControlVector {
        self.0.clone()
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Gaussian policy `N(mean(t, x), Sigma)` with a constant covariance.
#[derive(Clone, Debug)]
pub struct GaussianPolicy<M> {
    mean_fn: M,
    cov: Covariance,
}

impl<M: MeanFunction> GaussianPolicy<M> {
    pub fn new(mean_fn: M, cov: Covariance) -> Self {
        GaussianPolicy { mean_fn, cov }
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn mean(&self, t: usize, x: &StateVector) -> ControlVector {
        self.mean_fn.mean(t, x)
    }
}

impl<M: MeanFunction> StochasticPolicy for GaussianPolicy<M> {
    fn control_dim(&self) -> usize {
        self.cov.dim()
    }

    fn sample<R: Rng + ?Sized>(&self, t: usize, x: &StateVector, rng: &mut R) -> ControlVector {
        let mut u = self.mean_fn.mean(t, x);
        debug_assert_eq!(u.dim(), self.cov.dim());
        self.cov.add_sample_offset(&mut u.coords, rng);
        u
    }

    fn log_density(&self, t: usize, x: &StateVector, u: &ControlVector) -> Option<f64> {
        let mean = self.mean_fn.mean(t, x);
        let mut diff: SmallVec<[f64; 2]> = SmallVec::with_capacity(u.dim());
        for i in 0..u.dim() {
            diff.push(u[i] - mean[i]);
        }
        let quad = self.cov.quad_form_inv(&diff);
        Some(-0.5 * (quad + self.cov.dim() as f64 * LN_2PI + self.cov.log_det()))
    }
}

//! Sampling-free reference implementations.
//!
//! Everything in this module computes quantities the Monte-Carlo sampler
//! only estimates: exact values and policies on finite instances
//! ([`finite`]), quadrature solutions of continuous instances on dense
//! grids ([`grid`]), the closed-form one-step Gaussian posterior
//! ([`gaussian`]), and the variational identity tying free energy to the
//! KL-regularized cost ([`duality`]). Tests lean on these as ground truth.

pub mod duality;
pub mod finite;
pub mod gaussian;
pub mod grid;

pub use duality::{legendre_duality_check, DualityReport};
pub use finite::{
    embed, enumerate_dp, path_integral_z, policy_objective, z_recursion, DpSolution,
    FiniteCost, FiniteDynamics, FiniteKLProblem, FiniteReference, OracleError, Transition,
    DEFAULT_ENUMERATION_CAP,
};
pub use gaussian::{gaussian_one_step, gaussian_one_step_quadrature, Gaussian1};
pub use grid::{grid_dp, grid_policy, GridAxis, GridSolution, GridSpec, OutOfBounds};

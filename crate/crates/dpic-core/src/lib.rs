//! Sampling-based synthesis of KL-constrained control policies, with the
//! detection-theoretic measurements that make their conspicuousness
//! quantifiable.
//!
//! The problem: an agent wants to minimize an additive path cost while its
//! behaviour stays statistically close to a prescribed stochastic
//! reference policy R, the closeness priced by a KL term,
//!
//! ```text
//!     minimize_Q  E_Q[ C_{0:T} ] + lambda D(Q || R).
//! ```
//!
//! The minimizer has a closed form: at each stage the optimal policy tilts
//! the reference by the exponentiated cost-to-go,
//! Q*(u|x) prop. R(u|x) exp(-rho_t(x,u)/lambda), and the value function
//! satisfies a log-sum-exp recursion that becomes *linear* in the
//! desirability Z = exp(-J/lambda). That linearity is what makes the
//! Monte-Carlo scheme work: Z_t(x) = E_R[exp(-C_{t:T}/lambda)], so tail
//! costs of plain reference rollouts, exponentially reweighted, sample the
//! optimal policy without ever representing it.
//!
//! Module map:
//! - [`model`]: dynamics/policy/cost traits, trajectories, Gaussian policies.
//! - [`sampler`]: the per-step rollout/reweight/select loop and its
//!   deterministic seed derivation.
//! - [`oracle`]: exact solvers (finite enumeration, grid quadrature,
//!   one-step Gaussian, duality identity) used as ground truth in tests.
//! - [`metrics`]: LLR traces, KL divergences, detection error sweeps,
//!   safety rates, CSV emission.
//! - [`scenarios`]: the unicycle-past-the-fire benchmark and TOML
//!   configuration.

pub mod metrics;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod scenarios;

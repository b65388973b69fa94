//! The benchmark scenario and configuration ingestion.
//!
//! A unicycle starts at the origin and is nudged toward a goal by a
//! proportional reference controller; two fire regions straddle the direct
//! route, and the path cost counts the time steps spent inside them. The
//! default geometry below is frozen: it was calibrated so that only a few
//! percent of reference paths stay clear, leaving room for the tilted
//! policies to trade safety against conspicuousness.
//!
//! Configuration is TOML with `[scenario]` and `[run]` tables; every field
//! has a default, unknown keys are rejected, region syntax is
//! `{ rect = { xmin, xmax, ymin, ymax } }` or `{ disk = { cx, cy, r } }`.

use crate::model::{
    ControlVector, CostModel, Covariance, DeterministicDynamics, GaussianPolicy, MeanFunction,
    StateVector,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Closed axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }
}

/// Closed disk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disk {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Rect(Rect),
    Disk(Disk),
}

impl Region {
    /// Membership is closed: boundary points count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Rect(r) => r.contains(x, y),
            Region::Disk(d) => d.contains(x, y),
        }
    }

    fn validate(&self, field: &str) -> Result<(), ScenarioError> {
        match self {
            Region::Rect(r) => {
                let finite = [r.xmin, r.xmax, r.ymin, r.ymax].iter().all(|v| v.is_finite());
                if !finite || r.xmin >= r.xmax || r.ymin >= r.ymax {
                    return Err(invalid(field, "rectangle must have xmin < xmax, ymin < ymax"));
                }
            }
            Region::Disk(d) => {
                if !(d.r > 0.0 && d.r.is_finite() && d.cx.is_finite() && d.cy.is_finite()) {
                    return Err(invalid(field, "disk must have a positive finite radius"));
                }
            }
        }
        Ok(())
    }

    /// Same shape shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Region {
        match *self {
            Region::Rect(r) => Region::Rect(Rect {
                xmin: r.xmin + dx,
                xmax: r.xmax + dx,
                ymin: r.ymin + dy,
                ymax: r.ymax + dy,
            }),
            Region::Disk(d) => Region::Disk(Disk {
                cx: d.cx + dx,
                cy: d.cy + dy,
                r: d.r,
            }),
        }
    }
}

/// Control covariance: a scalar means that multiple of the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Scalar(f64),
    Matrix([[f64; 2]; 2]),
}

impl SigmaSpec {
    pub fn covariance(&self) -> Result<Covariance, ScenarioError> {
        let result = match *self {
            SigmaSpec::Scalar(v) => Covariance::isotropic(2, v),
            SigmaSpec::Matrix(m) => {
                Covariance::new(2, vec![m[0][0], m[0][1], m[1][0], m[1][1]])
            }
        };
        result.map_err(|e| invalid("scenario.sigma", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnicycleScenario {
    pub goal_x: f64,
    pub goal_y: f64,
    /// Radius of the goal disk used by reach checks.
    pub goal_radius: f64,
    /// Proportional gain pulling speed toward the desired approach speed.
    pub k_a: f64,
    /// Proportional gain pulling heading toward the goal bearing.
    pub k_omega: f64,
    pub sigma: SigmaSpec,
    pub step_size: f64,
    pub horizon: usize,
    /// Initial (x position, y position, speed, heading).
    pub x0: [f64; 4],
    pub fire: Vec<Region>,
}

impl Default for UnicycleScenario {
    fn default() -> Self {
        UnicycleScenario {
            goal_x: 45.0,
            goal_y: 0.0,
            goal_radius: 2.5,
            k_a: 0.1,
            k_omega: 0.2,
            sigma: SigmaSpec::Scalar(0.5),
            step_size: 1.0,
            horizon: 50,
            x0: [0.0; 4],
            // frozen default layout: a wall rising from the axis at
            // x in [6, 23] and a deeper moat over x in [10, 37] below it.
            // Everything left of the wall is clear, and the strip between
            // the wall's face and the moat's edge gives paths that slip
            // below the axis room to recover, so evasive policies can brake
            // and retreat while reference paths drift right and burn; the
            // survivors clear the wall above y = 33 or never leave the
            // start region. Roughly one reference path in twenty stays
            // clear over the full horizon
            fire: vec![
                Region::Rect(Rect {
                    xmin: 6.0,
                    xmax: 23.0,
                    ymin: 0.0,
                    ymax: 33.0,
                }),
                Region::Rect(Rect {
                    xmin: 10.0,
                    xmax: 37.0,
                    ymin: -40.0,
                    ymax: 0.0,
                }),
            ],
        }
    }
}

impl UnicycleScenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.horizon < 1 {
            return Err(invalid("scenario.horizon", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid("scenario.step_size", "must be positive"));
        }
        if !(self.goal_radius > 0.0 && self.goal_radius.is_finite()) {
            return Err(invalid("scenario.goal_radius", "must be positive"));
        }
        for (name, v) in [
            ("scenario.goal_x", self.goal_x),
            ("scenario.goal_y", self.goal_y),
            ("scenario.k_a", self.k_a),
            ("scenario.k_omega", self.k_omega),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("scenario.x0", "must be finite"));
        }
        self.sigma.covariance()?;
        for (i, region) in self.fire.iter().enumerate() {
            region.validate(&format!("scenario.fire[{i}]"))?;
        }
        Ok(())
    }

    /// Whether the pose at `x` sits inside any fire region.
    pub fn in_fire(&self, x: &StateVector) -> bool {
        self.fire.iter().any(|r| r.contains(x[0], x[1]))
    }

    pub fn goal_distance(&self, x: &StateVector) -> f64 {
        (self.goal_x - x[0]).hypot(self.goal_y - x[1])
    }

    pub fn initial_state(&self) -> StateVector {
        StateVector::from(self.x0)
    }
}

/// Kinematic unicycle. The position advances with the pre-update speed and
/// heading; speed and heading then absorb the control.
#[derive(Clone, Copy, Debug)]
pub struct UnicycleDynamics {
    horizon: usize,
    h: f64,
}

pub fn unicycle_dynamics(scenario: &UnicycleScenario) -> UnicycleDynamics {
    UnicycleDynamics {
        horizon: scenario.horizon,
        h: scenario.step_size,
    }
}

impl DeterministicDynamics for UnicycleDynamics {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn step(&self, _t: usize, x: &StateVector, u: &ControlVector) -> StateVector {
        let (px, py, s, th) = (x[0], x[1], x[2], x[3]);
        StateVector::from([
            px + s * th.cos() * self.h,
            py + s * th.sin() * self.h,
            s + u[0] * self.h,
            th + u[1] * self.h,
        ])
    }
}

/// Mean of the reference controller: aim the heading at the goal and pace
/// the speed to arrive exactly at the horizon.
#[derive(Clone, Copy, Debug)]
pub struct ProportionalNav {
    goal_x: f64,
    goal_y: f64,
    k_a: f64,
    k_omega: f64,
    horizon: usize,
}

impl MeanFunction for ProportionalNav {
    fn mean(&self, t: usize, x: &StateVector) -> ControlVector {
        debug_assert!(t < self.horizon, "no control at the terminal time");
        let dx = self.goal_x - x[0];
        let dy = self.goal_y - x[1];
        let dist = dx.hypot(dy);
        let s_des = dist / (self.horizon - t) as f64;
        // at the goal center the bearing is undefined; hold the current
        // heading (zero angular correction)
        let th_des = if dx == 0.0 && dy == 0.0 {
            x[3]
        } else {
            dy.atan2(dx)
        };
        ControlVector::from([
            -self.k_a * (x[2] - s_des),
            -self.k_omega * (x[3] - th_des),
        ])
    }
}

pub fn reference_policy(
    scenario: &UnicycleScenario,
) -> Result<GaussianPolicy<ProportionalNav>, ScenarioError> {
    Ok(GaussianPolicy::new(
        ProportionalNav {
            goal_x: scenario.goal_x,
            goal_y: scenario.goal_y,
            k_a: scenario.k_a,
            k_omega: scenario.k_omega,
            horizon: scenario.horizon,
        },
        scenario.sigma.covariance()?,
    ))
}

/// Unit cost per time step spent in fire. The stage term covers states
/// `x_0 .. x_{T-1}` and the terminal term `x_T`, so a path accumulates one
/// unit for every visited state inside a region.
#[derive(Clone, Debug)]
pub struct FireCost {
    regions: Vec<Region>,
}

pub fn fire_cost(scenario: &UnicycleScenario) -> FireCost {
    FireCost {
        regions: scenario.fire.clone(),
    }
}

impl FireCost {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.regions.iter().any(|r| r.contains(x, y))
    }
}

impl CostModel for FireCost {
    fn stage(&self, _t: usize, x: &StateVector, _u: &ControlVector) -> f64 {
        f64::from(self.contains(x[0], x[1]))
    }
    fn terminal(&self, x: &StateVector) -> f64 {
        f64::from(self.contains(x[0], x[1]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub lambda: f64,
    /// Rollouts per replanning step.
    pub samples: usize,
    pub episodes: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            lambda: 2.0,
            samples: 100_000,
            episodes: 100,
            seed: 42,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: UnicycleScenario,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.scenario.validate()?;
        if !(self.run.lambda > 0.0 && self.run.lambda.is_finite()) {
            return Err(invalid("run.lambda", "must be positive"));
        }
        if self.run.samples < 1 {
            return Err(invalid("run.samples", "must be at least 1"));
        }
        if self.run.episodes < 1 {
            return Err(invalid("run.episodes", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ScenarioError> {
    RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{reference_episode, EpisodeSeed, SeedLineage};
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn dynamics_step() {
        let sc = UnicycleScenario::default();
        let dyn4 = unicycle_dynamics(&sc);
        let x = StateVector::from([0.0, 0.0, 2.0, FRAC_PI_2]);
        let u = ControlVector::from([1.0, 0.0]);
        let next = dyn4.step(0, &x, &u);
        assert!(next[0].abs() < 1e-12, "heading pi/2 moves straight up");
        assert_relative_eq!(next[1], 2.0);
        assert_relative_eq!(next[2], 3.0);
        assert_relative_eq!(next[3], FRAC_PI_2);
    }

    #[test]
    fn reference_mean_at_start() {
        let sc = UnicycleScenario::default();
        let policy = reference_policy(&sc).unwrap();
        // from (0,0) at speed 0.2 heading 0: desired speed 45/50 = 0.9,
        // desired heading 0
        let mean = policy.mean(0, &StateVector::from([0.0, 0.0, 0.2, 0.0]));
        assert_relative_eq!(mean[0], -0.1 * (0.2 - 0.9), epsilon = 1e-15);
        assert_relative_eq!(mean[1], 0.0);
    }

    #[test]
    fn reference_mean_at_goal_center() {
        let sc = UnicycleScenario::default();
        let policy = reference_policy(&sc).unwrap();
        let mean = policy.mean(10, &StateVector::from([45.0, 0.0, 1.5, 0.8]));
        // desired speed 0, heading correction 0
        assert_relative_eq!(mean[0], -0.1 * 1.5, epsilon = 1e-15);
        assert_relative_eq!(mean[1], 0.0);
    }

    #[test]
    fn mean_controller_reaches_goal() {
        let sc = UnicycleScenario::default();
        let dynamics = unicycle_dynamics(&sc);
        let policy = reference_policy(&sc).unwrap();
        let mut x = sc.initial_state();
        for t in 0..sc.horizon {
            let u = policy.mean(t, &x);
            x = dynamics.step(t, &x, &u);
        }
        let dist = sc.goal_distance(&x);
        assert!(dist < 1.0, "noise-free closed loop ends {dist} m from the goal");
        assert!(dist < sc.goal_radius);
    }

    #[test]
    fn reference_ensemble_progresses_toward_goal() {
        let sc = UnicycleScenario::default();
        let dynamics = unicycle_dynamics(&sc);
        let policy = reference_policy(&sc).unwrap();
        let costs = fire_cost(&sc);
        let lineage = SeedLineage::new(5);
        let mut finals: Vec<f64> = (0..100)
            .map(|e| {
                let path = reference_episode(
                    &dynamics,
                    &policy,
                    &costs,
                    &sc.initial_state(),
                    EpisodeSeed::new(lineage, e),
                );
                sc.goal_distance(path.final_state())
            })
            .collect();
        finals.sort_by(f64::total_cmp);
        let median = finals[finals.len() / 2];
        assert!(
            median < 40.0,
            "median terminal goal distance {median} shows no progress from 45"
        );
    }

    #[test]
    fn fire_membership_is_closed() {
        let sc = UnicycleScenario::default();
        // on the shared edge y = 0 inside the lower rectangle's x-band
        assert!(sc.in_fire(&StateVector::from([15.0, 0.0, 0.0, 0.0])));
        assert!(sc.in_fire(&StateVector::from([23.0, 33.0, 0.0, 0.0])));
        assert!(!sc.in_fire(&StateVector::from([5.9, 0.1, 0.0, 0.0])));
        // origin and goal are clear
        assert!(!sc.in_fire(&sc.initial_state()));
        assert!(!sc.in_fire(&StateVector::from([45.0, 0.0, 0.0, 0.0])));

        let disk = Region::Disk(Disk { cx: 0.0, cy: 0.0, r: 2.0 });
        assert!(disk.contains(2.0, 0.0), "boundary included");
        assert!(!disk.contains(2.0 + 1e-9, 0.0));
    }

    #[test]
    fn fire_cost_counts_every_visited_state() {
        let sc = UnicycleScenario::default();
        let costs = fire_cost(&sc);
        let inside = StateVector::from([16.0, 1.0, 0.0, 0.0]);
        let outside = StateVector::from([0.0, 0.0, 0.0, 0.0]);
        let u = ControlVector::from([0.0, 0.0]);
        assert_eq!(costs.stage(0, &inside, &u), 1.0);
        assert_eq!(costs.stage(7, &outside, &u), 0.0);
        assert_eq!(costs.terminal(&inside), 1.0);

        // a 2-step path sitting in fire the whole time costs 3: states
        // x_0, x_1, x_2 each count once
        let states = vec![inside.clone(), inside.clone(), inside.clone()];
        let controls = vec![u.clone(), u.clone()];
        let cost: f64 = (0..2)
            .map(|t| costs.stage(t, &states[t], &controls[t]))
            .sum::<f64>()
            + costs.terminal(&states[2]);
        assert_eq!(cost, 3.0);
    }

    #[test]
    fn fire_cost_is_translation_consistent() {
        let mut sc = UnicycleScenario::default();
        let (dx, dy) = (-11.5, 7.25);
        let shifted_regions: Vec<Region> =
            sc.fire.iter().map(|r| r.translated(dx, dy)).collect();
        let costs = fire_cost(&sc);
        sc.fire = shifted_regions;
        let shifted_costs = fire_cost(&sc);

        let states: Vec<StateVector> = [(0.0, 0.0), (16.0, 1.0), (30.0, -5.0), (44.0, 0.0)]
            .iter()
            .map(|&(x, y)| StateVector::from([x, y, 1.0, 0.0]))
            .collect();
        let u = ControlVector::from([0.0, 0.0]);
        let mut original_cost = 0.0;
        let mut shifted_cost = 0.0;
        for t in 0..3 {
            original_cost += costs.stage(t, &states[t], &u);
            let shifted = StateVector::from([states[t][0] + dx, states[t][1] + dy, 1.0, 0.0]);
            shifted_cost += shifted_costs.stage(t, &shifted, &u);
        }
        original_cost += costs.terminal(&states[3]);
        shifted_cost += shifted_costs.terminal(&StateVector::from([
            states[3][0] + dx,
            states[3][1] + dy,
            1.0,
            0.0,
        ]));
        assert!(original_cost > 0.0, "the sample path must cross the fire");
        assert_eq!(original_cost, shifted_cost);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let config = RunConfig::from_toml_str("[run]\nlambda = 0.5\n").unwrap();
        assert_eq!(config.run.lambda, 0.5);
        assert_eq!(config.run.samples, 100_000);
        assert_eq!(config.run.episodes, 100);
        assert_eq!(config.run.seed, 42);
        assert_eq!(config.scenario, UnicycleScenario::default());

        let empty = RunConfig::from_toml_str("").unwrap();
        assert_eq!(empty, RunConfig::default());
    }

    #[test]
    fn config_validation_names_the_field() {
        let err = RunConfig::from_toml_str("[run]\nlambda = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("run.lambda"), "{err}");

        let err = RunConfig::from_toml_str("[scenario]\nsigma = [[0.5, 0.9], [0.9, 0.5]]\n")
            .unwrap_err();
        assert!(err.to_string().contains("scenario.sigma"), "{err}");

        let err = RunConfig::from_toml_str("[scenario]\nhorizon = 0\n").unwrap_err();
        assert!(err.to_string().contains("scenario.horizon"), "{err}");

        let err = RunConfig::from_toml_str("[run]\nseeed = 1\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)), "unknown key rejected: {err}");
    }

    #[test]
    fn config_round_trips() {
        let text = r#"
            [scenario]
            goal_x = 30.0
            horizon = 25
            sigma = 0.25
            fire = [
                { rect = { xmin = 5.0, xmax = 10.0, ymin = -3.0, ymax = 3.0 } },
                { disk = { cx = 20.0, cy = 1.0, r = 4.0 } },
            ]

            [run]
            lambda = 1.5
            samples = 500
            episodes = 3
            seed = 7
            out_dir = "artifacts"
        "#;
        let config = RunConfig::from_toml_str(text).unwrap();
        let serialized = toml::to_string(&config).unwrap();
        let reparsed = RunConfig::from_toml_str(&serialized).unwrap();
        assert_eq!(config, reparsed);
        assert_eq!(config.scenario.fire.len(), 2);
    }

    #[test]
    fn anisotropic_sigma_accepted() {
        let config = RunConfig::from_toml_str(
            "[scenario]\nsigma = [[0.5, 0.1], [0.1, 0.5]]\n",
        )
        .unwrap();
        let cov = config.scenario.sigma.covariance().unwrap();
        assert_eq!(cov.dim(), 2);
    }
}

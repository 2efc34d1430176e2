//! Multi-leg maneuvers through a list of waypoints.
//!
//! Each leg is a fixed-time problem from the state actually reached at the end
//! of the previous leg to the next waypoint; wheel angles carry over since the
//! final wheel angles of every leg are free.
//!
//! Config files give angles in degrees. They are converted to radians here and
//! nowhere else.

use std::path::Path;

use log::info;
use serde::Deserialize;

use crate::integrator::NodeState;
use crate::model::{BaseState, BaseVelocity, Torque, WipModel};
use crate::pmp::{Bounds, Multipliers, NodeCostate};
use crate::se2::GroupElement;
use crate::shooting::{self, OcProblem, ShootingConfig, SolveReport};
use crate::{Error, Result};

/// Tolerance on `duration / h` being a whole number of steps.
const STEP_COUNT_TOL: f64 = 1e-9;

/// Boundary data at one waypoint, in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub pose: GroupElement,
    pub alpha: f64,
    pub v: BaseVelocity,
    /// Duration of the leg that ends here; ignored on the first waypoint.
    pub duration: f64,
}

impl Waypoint {
    /// Builds a waypoint from the degree-valued config representation.
    pub fn from_degrees(x: f64, y: f64, theta_deg: f64, alpha_deg: f64, v: [f64; 3], duration: f64) -> Self {
        Self {
            pose: GroupElement::new(x, y, theta_deg.to_radians()),
            alpha: alpha_deg.to_radians(),
            v: BaseVelocity::new(v[0], v[1], v[2]),
            duration,
        }
    }
}

/// The built-in maneuvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    /// Closed tour `a -> b -> c -> d -> a` starting and ending at rest.
    M1,
    /// Out and back `A -> B -> A` between two rolling states.
    M2,
}

impl std::str::FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M1" | "m1" => Ok(Builtin::M1),
            "M2" | "m2" => Ok(Builtin::M2),
            other => Err(Error::invalid("builtin", format!("unknown maneuver {other:?}, expected M1 or M2"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManeuverSpec {
    pub name: String,
    pub waypoints: Vec<Waypoint>,
    pub bounds: Bounds,
    /// Step length in seconds.
    pub h: f64,
}

/// Torque bound of the prototype.
pub const TORQUE_BOUND: f64 = 8e-3;
/// Wheel and tilt rate bound used by the built-ins.
pub const VELOCITY_BOUND: f64 = 15.0;
/// Tilt bound used by the built-ins, in degrees.
pub const TILT_BOUND_DEG: f64 = 30.0;
/// Sampling time of the built-ins.
pub const BUILTIN_STEP: f64 = 0.05;
/// Duration of every built-in leg.
pub const BUILTIN_LEG_DURATION: f64 = 5.0;

fn builtin_bounds() -> Bounds {
    Bounds { torque: TORQUE_BOUND, velocity: VELOCITY_BOUND, tilt: TILT_BOUND_DEG.to_radians() }
}

impl ManeuverSpec {
    pub fn builtin(which: Builtin) -> Self {
        let t = BUILTIN_LEG_DURATION;
        let wp = Waypoint::from_degrees;
        let (name, waypoints) = match which {
            Builtin::M1 => (
                "M1",
                vec![
                    wp(0.0, 0.0, 0.0, 0.0, [0.0, 0.0, 0.0], 0.0),
                    wp(1.0, 1.0, 135.0, 5.0, [0.0, 1.0, 1.0], t),
                    wp(0.0, 2.0, 135.0, 5.0, [0.0, 0.5, 0.5], t),
                    wp(-1.0, 1.0, 0.0, 5.0, [0.0, 0.5, 0.5], t),
                    wp(0.0, 0.0, 0.0, 0.0, [0.0, 0.0, 0.0], t),
                ],
            ),
            Builtin::M2 => (
                "M2",
                vec![
                    wp(0.0, 0.0, 0.0, 0.0, [0.0, 5.0, 5.0], 0.0),
                    wp(0.0, 2.0, 0.0, 0.0, [0.0, 5.0, 5.0], t),
                    wp(0.0, 0.0, 0.0, 0.0, [0.0, 5.0, 5.0], t),
                ],
            ),
        };
        Self { name: name.to_string(), waypoints, bounds: builtin_bounds(), h: BUILTIN_STEP }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::invalid("waypoint", format!("need at least 2 waypoints, got {}", self.waypoints.len())));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::invalid("h", format!("must be finite and > 0, got {}", self.h)));
        }
        self.bounds.validate()?;
        for (i, w) in self.waypoints.iter().enumerate() {
            let finite = w.pose.is_finite() && w.alpha.is_finite() && w.v.to_vector().iter().all(|x| x.is_finite());
            if !finite {
                return Err(Error::invalid("waypoint", format!("waypoint {i} has a non-finite entry")));
            }
            if i > 0 {
                self.steps(i - 1)?;
            }
        }
        Ok(())
    }

    pub fn legs(&self) -> usize {
        self.waypoints.len() - 1
    }

    /// Step count of leg `leg`.
    pub fn steps(&self, leg: usize) -> Result<usize> {
        let duration = self.waypoints[leg + 1].duration;
        let n = duration / self.h;
        if !(n.is_finite() && (n - n.round()).abs() <= STEP_COUNT_TOL * n.max(1.0) && n.round() >= 2.0) {
            return Err(Error::invalid(
                "duration_s",
                format!("leg {leg}: duration {duration} s is not a whole number (>= 2) of {} s steps", self.h),
            ));
        }
        Ok(n.round() as usize)
    }

    /// State at the first waypoint, wheel angles zero.
    pub fn initial_state(&self) -> NodeState {
        let w = &self.waypoints[0];
        NodeState::new(w.pose, BaseState::new(w.alpha, 0.0, 0.0), w.v)
    }

    /// Problem of leg `leg` starting from `start`.
    pub fn leg_problem(&self, leg: usize, start: NodeState) -> Result<OcProblem> {
        let target = &self.waypoints[leg + 1];
        let p = OcProblem {
            initial: start,
            final_g: target.pose,
            final_alpha: target.alpha,
            final_v: target.v,
            n_steps: self.steps(leg)?,
            h: self.h,
            bounds: self.bounds,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ManeuverFile = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
        let spec = file.into_spec();
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManeuverFile {
    name: String,
    #[serde(default = "default_step")]
    h: f64,
    #[serde(default = "default_mu")]
    mu: f64,
    #[serde(default = "default_nu")]
    nu: f64,
    #[serde(default = "default_tilt")]
    a_deg: f64,
    waypoint: Vec<WaypointFile>,
}

fn default_step() -> f64 {
    BUILTIN_STEP
}

fn default_mu() -> f64 {
    TORQUE_BOUND
}

fn default_nu() -> f64 {
    VELOCITY_BOUND
}

fn default_tilt() -> f64 {
    TILT_BOUND_DEG
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointFile {
    x: f64,
    y: f64,
    theta_deg: f64,
    #[serde(default)]
    alpha_deg: f64,
    #[serde(default)]
    v_alpha: f64,
    #[serde(default)]
    v_phi1: f64,
    #[serde(default)]
    v_phi2: f64,
    #[serde(default)]
    duration_s: f64,
}

impl ManeuverFile {
    fn into_spec(self) -> ManeuverSpec {
        let waypoints = self
            .waypoint
            .iter()
            .map(|w| Waypoint::from_degrees(w.x, w.y, w.theta_deg, w.alpha_deg, [w.v_alpha, w.v_phi1, w.v_phi2], w.duration_s))
            .collect();
        ManeuverSpec {
            name: self.name,
            waypoints,
            bounds: Bounds { torque: self.mu, velocity: self.nu, tilt: self.a_deg.to_radians() },
            h: self.h,
        }
    }
}

/// Node read from an initial-state file; angles in degrees, rates in rad/s.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    x: f64,
    y: f64,
    theta_deg: f64,
    #[serde(default)]
    alpha_deg: f64,
    #[serde(default)]
    phi1_deg: f64,
    #[serde(default)]
    phi2_deg: f64,
    #[serde(default)]
    v_alpha: f64,
    #[serde(default)]
    v_phi1: f64,
    #[serde(default)]
    v_phi2: f64,
}

/// Parses an initial-state file.
pub fn state_from_toml_str(text: &str) -> Result<NodeState> {
    let f: StateFile = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
    let x = NodeState::new(
        GroupElement::new(f.x, f.y, f.theta_deg.to_radians()),
        BaseState::new(f.alpha_deg.to_radians(), f.phi1_deg.to_radians(), f.phi2_deg.to_radians()),
        BaseVelocity::new(f.v_alpha, f.v_phi1, f.v_phi2),
    );
    if !x.is_finite() {
        return Err(Error::invalid("initial", "state has a non-finite entry"));
    }
    Ok(x)
}

/// One solved leg.
#[derive(Debug, Clone)]
pub struct Leg {
    pub problem: OcProblem,
    pub report: SolveReport,
}

/// All legs of a maneuver, in order.
#[derive(Debug, Clone)]
pub struct ManeuverOutcome {
    pub name: String,
    pub legs: Vec<Leg>,
}

impl ManeuverOutcome {
    pub fn converged(&self) -> bool {
        self.legs.iter().all(|l| l.report.converged)
    }

    pub fn total_cost(&self) -> f64 {
        self.legs.iter().map(|l| l.report.cost).sum()
    }

    /// First node index of every leg in the concatenated trajectory.
    pub fn offsets(&self) -> Vec<usize> {
        self.legs
            .iter()
            .scan(0, |k, l| {
                let start = *k;
                *k += l.problem.n_steps;
                Some(start)
            })
            .collect()
    }

    /// Nodes of all legs; the junction node appears once.
    pub fn trajectory(&self) -> Vec<NodeState> {
        let mut out = Vec::new();
        for (i, leg) in self.legs.iter().enumerate() {
            let skip = usize::from(i > 0);
            out.extend_from_slice(&leg.report.trajectory[skip..]);
        }
        out
    }

    pub fn torques(&self) -> Vec<Torque> {
        self.legs.iter().flat_map(|l| l.report.torques.iter().copied()).collect()
    }

    /// Costates and multipliers per node; at a junction the values that
    /// start the next leg win.
    pub fn costates(&self) -> Vec<(NodeCostate, Multipliers)> {
        let mut out: Vec<(NodeCostate, Multipliers)> = Vec::new();
        for leg in &self.legs {
            out.pop();
            out.extend(leg.report.costates.iter().copied().zip(leg.report.multipliers.iter().copied()));
        }
        out
    }

    /// Time of node `k` of the concatenated trajectory.
    pub fn times(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for leg in &self.legs {
            let t0 = *out.last().expect("non-empty");
            out.extend((1..=leg.problem.n_steps).map(|k| t0 + k as f64 * leg.problem.h));
        }
        out
    }
}

/// Solves the legs in order, each from the node the previous one reached.
///
/// Stops after the first leg that does not converge, since the next start
/// would not lie on an optimal trajectory.
pub fn solve_maneuver(spec: &ManeuverSpec, cfg: &ShootingConfig, model: &WipModel) -> Result<ManeuverOutcome> {
    spec.validate()?;
    let mut start = spec.initial_state();
    let mut legs = Vec::with_capacity(spec.legs());
    for leg in 0..spec.legs() {
        let problem = spec.leg_problem(leg, start)?;
        let report = shooting::solve(&problem, cfg, model)?;
        info!(
            "{} leg {leg}: converged {} residual {:.3e} cost {:.6e} iterations {}",
            spec.name, report.converged, report.final_residual, report.cost, report.iterations
        );
        start = *report.trajectory.last().expect("non-empty trajectory");
        let done = !report.converged;
        legs.push(Leg { problem, report });
        if done {
            break;
        }
    }
    Ok(ManeuverOutcome { name: spec.name.clone(), legs })
}

//! Files written by a run and read back by the checker.
//!
//! A run directory holds
//!
//! * `trajectory.csv`: one row per node with state, torque, costate and
//!   multipliers (torque of the last node and costates of a simulation are 0),
//! * `costates.csv`: costates and multipliers per leg, junction nodes included
//!   once per leg,
//! * `residuals.csv`: residual norm after every accepted solver step,
//! * `summary.toml`: parameters, per-leg boundary data and solver outcome,
//! * `plot.py`: a matplotlib script drawing the trajectory panels.
//!
//! Numbers are written with 17 significant digits so a round trip is exact.
//! Every file is written to a temporary name and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::integrator::NodeState;
use crate::maneuver::ManeuverOutcome;
use crate::model::{BaseVelocity, Torque, WipModel, WipParams};
use crate::pmp::{Bounds, Multipliers, NodeCostate};
use crate::se2::GroupElement;
use crate::shooting::{self, OcProblem, SolveReport, Violation};
use crate::{Error, Result};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const COSTATE_FILE: &str = "costates.csv";
pub const RESIDUAL_FILE: &str = "residuals.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const PLOT_FILE: &str = "plot.py";

const STATE_COLUMNS: [&str; 9] = ["x", "y", "theta", "alpha", "phi1", "phi2", "v_alpha", "v_phi1", "v_phi2"];
const COSTATE_COLUMNS: [&str; 13] =
    ["zeta1", "zeta2", "zeta3", "psi1", "psi2", "psi3", "lambda1", "lambda2", "lambda3", "sigma", "beta1", "beta2", "beta3"];

/// Paths of the files of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub trajectory: PathBuf,
    pub costates: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            trajectory: dir.join(TRAJECTORY_FILE),
            costates: dir.join(COSTATE_FILE),
            summary: dir.join(SUMMARY_FILE),
            plot: dir.join(PLOT_FILE),
        }
    }
}

/// Writes `contents` to `path` through a sibling temporary file and a rename,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut file = fs::File::create(&tmp)?;
    file.write_all(contents)?;
    file.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn num(out: &mut String, x: f64) {
    write!(out, ",{x:.16e}").expect("writing to a String");
}

/// Trajectory table with the full column set.
pub fn trajectory_csv(
    times: &[f64],
    nodes: &[NodeState],
    torques: &[Torque],
    costates: &[(NodeCostate, Multipliers)],
) -> String {
    let mut out = String::from("k,t");
    for c in STATE_COLUMNS.iter().chain(&["tau1", "tau2"]).chain(&COSTATE_COLUMNS) {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (k, x) in nodes.iter().enumerate() {
        out.push_str(&k.to_string());
        num(&mut out, times[k]);
        for v in x.to_array() {
            num(&mut out, v);
        }
        let tau = torques.get(k).copied().unwrap_or(Torque::ZERO);
        num(&mut out, tau.tau1);
        num(&mut out, tau.tau2);
        let (c, m) = costates.get(k).copied().unwrap_or_default();
        for v in c.to_array().into_iter().chain(m.to_array()) {
            num(&mut out, v);
        }
        out.push('\n');
    }
    out
}

fn costate_csv(outcome: &ManeuverOutcome) -> String {
    let mut out = String::from("leg,k");
    for c in COSTATE_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (leg, l) in outcome.legs.iter().enumerate() {
        for (k, (c, m)) in l.report.costates.iter().zip(&l.report.multipliers).enumerate() {
            write!(out, "{leg},{k}").expect("writing to a String");
            for v in c.to_array().into_iter().chain(m.to_array()) {
                num(&mut out, v);
            }
            out.push('\n');
        }
    }
    out
}

fn residual_csv(outcome: &ManeuverOutcome) -> String {
    let mut out = String::from("leg,step,residual\n");
    for (leg, l) in outcome.legs.iter().enumerate() {
        for (i, r) in l.report.history.iter().enumerate() {
            writeln!(out, "{leg},{i},{r:.16e}").expect("writing to a String");
        }
    }
    out
}

/// Boundary data and solver outcome of one leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegSummary {
    /// Index of the leg's first node in `trajectory.csv`.
    pub offset: usize,
    pub n_steps: usize,
    pub h: f64,
    pub mu: f64,
    pub nu: f64,
    pub a: f64,
    /// `(x, y, theta, alpha, phi1, phi2, v_alpha, v_phi1, v_phi2)`.
    pub initial: Vec<f64>,
    /// `(x, y, theta)`.
    pub final_g: Vec<f64>,
    pub final_alpha: f64,
    pub final_v: Vec<f64>,
    pub converged: bool,
    pub final_residual: f64,
    pub tol_residual: f64,
    pub cost: f64,
    pub iterations: usize,
    pub segments: usize,
}

impl LegSummary {
    fn new(offset: usize, problem: &OcProblem, report: &SolveReport) -> Self {
        Self {
            offset,
            n_steps: problem.n_steps,
            h: problem.h,
            mu: problem.bounds.torque,
            nu: problem.bounds.velocity,
            a: problem.bounds.tilt,
            initial: problem.initial.to_array().to_vec(),
            final_g: problem.final_g.to_vector().iter().copied().collect(),
            final_alpha: problem.final_alpha,
            final_v: problem.final_v.to_vector().iter().copied().collect(),
            converged: report.converged,
            final_residual: report.final_residual,
            tol_residual: report.tol_residual,
            cost: report.cost,
            iterations: report.iterations,
            segments: report.segments,
        }
    }

    pub fn problem(&self) -> Result<OcProblem> {
        let len = |field: &str, v: &[f64], n: usize| {
            if v.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(field, format!("expected {n} entries, got {}", v.len())))
            }
        };
        len("initial", &self.initial, 9)?;
        len("final_g", &self.final_g, 3)?;
        len("final_v", &self.final_v, 3)?;
        let p = OcProblem {
            initial: NodeState::from_slice(&self.initial),
            final_g: GroupElement::new(self.final_g[0], self.final_g[1], self.final_g[2]),
            final_alpha: self.final_alpha,
            final_v: BaseVelocity::new(self.final_v[0], self.final_v[1], self.final_v[2]),
            n_steps: self.n_steps,
            h: self.h,
            bounds: Bounds { torque: self.mu, velocity: self.nu, tilt: self.a },
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    /// `simulate` or `optimize`.
    pub kind: String,
    pub converged: bool,
    pub total_cost: f64,
    pub params: WipParams,
    #[serde(default)]
    pub leg: Vec<LegSummary>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{SUMMARY_FILE}: {}", e.message())))
    }
}

/// Writes every artifact of an optimization run into `dir`.
pub fn write_optimization(dir: &Path, outcome: &ManeuverOutcome, model: &WipModel) -> Result<RunArtifacts> {
    fs::create_dir_all(dir)?;
    let files = RunArtifacts::in_dir(dir);
    let csv = trajectory_csv(&outcome.times(), &outcome.trajectory(), &outcome.torques(), &outcome.costates());
    write_atomic(&files.trajectory, csv.as_bytes())?;
    write_atomic(&files.costates, costate_csv(outcome).as_bytes())?;
    write_atomic(&dir.join(RESIDUAL_FILE), residual_csv(outcome).as_bytes())?;
    let offsets = outcome.offsets();
    let summary = RunSummary {
        name: outcome.name.clone(),
        kind: "optimize".into(),
        converged: outcome.converged(),
        total_cost: outcome.total_cost(),
        params: model.params,
        leg: outcome.legs.iter().zip(offsets).map(|(l, off)| LegSummary::new(off, &l.problem, &l.report)).collect(),
    };
    write_summary(&files.summary, &summary)?;
    let bound = outcome.legs.first().map(|l| l.problem.bounds.torque);
    write_atomic(&files.plot, plot_script(&outcome.name, bound).as_bytes())?;
    Ok(files)
}

/// Writes the artifacts of an open-loop simulation into `dir`.
pub fn write_simulation(dir: &Path, h: f64, nodes: &[NodeState], torques: &[Torque], model: &WipModel) -> Result<RunArtifacts> {
    fs::create_dir_all(dir)?;
    let files = RunArtifacts::in_dir(dir);
    let times: Vec<f64> = (0..nodes.len()).map(|k| k as f64 * h).collect();
    write_atomic(&files.trajectory, trajectory_csv(&times, nodes, torques, &[]).as_bytes())?;
    write_atomic(&files.costates, b"leg,k\n")?;
    let summary = RunSummary {
        name: "simulation".into(),
        kind: "simulate".into(),
        converged: true,
        total_cost: shooting::cost(torques, h),
        params: model.params,
        leg: Vec::new(),
    };
    write_summary(&files.summary, &summary)?;
    write_atomic(&files.plot, plot_script("simulation", None).as_bytes())?;
    Ok(files)
}

fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let text = toml::to_string(summary).map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// A parsed `trajectory.csv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryTable {
    pub times: Vec<f64>,
    pub nodes: Vec<NodeState>,
    /// One per node; the last one carries no meaning.
    pub torques: Vec<Torque>,
    pub costates: Vec<(NodeCostate, Multipliers)>,
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingField(format!("{name} (column of {})", path.display())))
}

fn field(record: &csv::StringRecord, i: usize, name: &str, row: usize) -> Result<f64> {
    let text = record.get(i).unwrap_or("").trim();
    text.parse().map_err(|_| Error::invalid(name, format!("row {row}: cannot parse {text:?} as a number")))
}

/// Reads `tau1`/`tau2` columns from any CSV that has them.
pub fn read_torques(path: &Path) -> Result<Vec<Torque>> {
    let mut rd = reader(path)?;
    let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let (c1, c2) = (column(&headers, "tau1", path)?, column(&headers, "tau2", path)?);
    let mut out = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        out.push(Torque::new(field(&rec, c1, "tau1", row)?, field(&rec, c2, "tau2", row)?));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryTable> {
    let mut rd = reader(path)?;
    let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let state: Vec<usize> = STATE_COLUMNS.iter().map(|c| column(&headers, c, path)).collect::<Result<_>>()?;
    let cost: Vec<usize> = COSTATE_COLUMNS.iter().map(|c| column(&headers, c, path)).collect::<Result<_>>()?;
    let t = column(&headers, "t", path)?;
    let (c1, c2) = (column(&headers, "tau1", path)?, column(&headers, "tau2", path)?);
    let mut table = TrajectoryTable::default();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let x: Vec<f64> = state.iter().zip(STATE_COLUMNS).map(|(&i, n)| field(&rec, i, n, row)).collect::<Result<_>>()?;
        let c: Vec<f64> = cost.iter().zip(COSTATE_COLUMNS).map(|(&i, n)| field(&rec, i, n, row)).collect::<Result<_>>()?;
        table.times.push(field(&rec, t, "t", row)?);
        table.nodes.push(NodeState::from_slice(&x));
        table.torques.push(Torque::new(field(&rec, c1, "tau1", row)?, field(&rec, c2, "tau2", row)?));
        table.costates.push((NodeCostate::from_slice(&c[..9]), Multipliers::from_slice(&c[9..])));
    }
    Ok(table)
}

/// Costates and multipliers of every leg from `costates.csv`.
fn read_leg_costates(path: &Path, legs: usize) -> Result<Vec<Vec<(NodeCostate, Multipliers)>>> {
    let mut rd = reader(path)?;
    let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let leg_col = column(&headers, "leg", path)?;
    let cols: Vec<usize> = COSTATE_COLUMNS.iter().map(|c| column(&headers, c, path)).collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); legs];
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let leg = field(&rec, leg_col, "leg", row)? as usize;
        let c: Vec<f64> = cols.iter().zip(COSTATE_COLUMNS).map(|(&i, n)| field(&rec, i, n, row)).collect::<Result<_>>()?;
        out.get_mut(leg)
            .ok_or_else(|| Error::invalid("leg", format!("row {row}: leg {leg} not in the summary")))?
            .push((NodeCostate::from_slice(&c[..9]), Multipliers::from_slice(&c[9..])));
    }
    Ok(out)
}

/// Outcome of re-checking a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub kind: String,
    /// Violations found for every leg; empty lists mean the leg passed.
    pub legs: Vec<Vec<Violation>>,
    /// Largest deviation of a stored node from the re-simulated one.
    pub max_step_deviation: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.legs.iter().all(Vec::is_empty) && self.max_step_deviation <= 1e-8
    }
}

/// Re-checks the artifacts in `dir` without trusting the run that wrote them.
pub fn check_run(dir: &Path) -> Result<CheckReport> {
    let summary = RunSummary::load(dir)?;
    let model = WipModel::new(summary.params);
    model.params.validate()?;
    let table = read_trajectory(&dir.join(TRAJECTORY_FILE))?;
    let mut report = CheckReport { kind: summary.kind.clone(), legs: Vec::new(), max_step_deviation: 0.0 };
    if summary.kind == "simulate" {
        let h = table.times.get(1).map_or(0.05, |t1| t1 - table.times[0]);
        let cfg = crate::integrator::IntegratorConfig::with_step(h);
        for k in 1..table.nodes.len() {
            let next = crate::integrator::step(&table.nodes[k - 1], &table.torques[k - 1], &cfg, &model)?;
            let dev = next
                .to_array()
                .iter()
                .zip(table.nodes[k].to_array())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            report.max_step_deviation = report.max_step_deviation.max(dev);
        }
        return Ok(report);
    }
    let costates = read_leg_costates(&dir.join(COSTATE_FILE), summary.leg.len())?;
    for (leg, costates) in summary.leg.iter().zip(costates) {
        let problem = leg.problem()?;
        let range = leg.offset..leg.offset + leg.n_steps + 1;
        if range.end > table.nodes.len() {
            report.legs.push(vec![Violation::Shape {
                message: format!("leg at offset {} needs {} nodes, file has {}", leg.offset, range.end, table.nodes.len()),
            }]);
            continue;
        }
        let (costates, multipliers) = costates.into_iter().unzip();
        let solved = SolveReport {
            converged: leg.converged,
            iterations: leg.iterations,
            final_residual: leg.final_residual,
            tol_residual: leg.tol_residual,
            cost: leg.cost,
            h: leg.h,
            segments: leg.segments,
            trajectory: table.nodes[range.clone()].to_vec(),
            costates,
            multipliers,
            torques: table.torques[leg.offset..leg.offset + leg.n_steps].to_vec(),
            active_sets: Vec::new(),
            history: Vec::new(),
            stage_start_residuals: Vec::new(),
            abnormal_suspect: false,
        };
        report.legs.push(shooting::validate_report(&solved, &problem, &model));
    }
    Ok(report)
}

/// A matplotlib script drawing torques, position, tilt and heading, wheel and
/// tilt rates, and the planar path from `trajectory.csv` next to it.
pub fn plot_script(name: &str, torque_bound: Option<f64>) -> String {
    let bound = torque_bound.map_or("None".to_string(), |m| format!("{m:.16e}"));
    PLOT_TEMPLATE.replace("@NAME@", &name.replace('"', "'")).replace("@BOUND@", &bound)
}

const PLOT_TEMPLATE: &str = r#"#!/usr/bin/env python3
"""Plots for run "@NAME@"; reads trajectory.csv from this directory."""
import csv
import math
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
TORQUE_BOUND = @BOUND@

with open(os.path.join(HERE, "trajectory.csv"), newline="") as f:
    rows = list(csv.DictReader(f))


def col(name, rows=rows):
    return [float(r[name]) for r in rows]


t = col("t")
# the last row carries no torque
tq = t[:-1]
fig, ax = plt.subplots(3, 2, figsize=(11, 11))

a = ax[0][0]
a.step(tq, col("tau1", rows[:-1]), where="post", label="tau1")
a.step(tq, col("tau2", rows[:-1]), where="post", label="tau2")
if TORQUE_BOUND is not None:
    for s in (1, -1):
        a.axhline(s * TORQUE_BOUND, color="k", ls="--", lw=0.8)
a.set_title("control torque (N m s)")

a = ax[0][1]
a.plot(t, col("x"), label="x")
a.plot(t, col("y"), label="y")
a.set_title("position (m)")

a = ax[1][0]
a.plot(t, [math.degrees(v) for v in col("alpha")], label="tilt")
a.plot(t, [math.degrees(v) for v in col("theta")], label="heading")
a.set_title("tilt and heading (deg)")

a = ax[1][1]
for name in ("v_alpha", "v_phi1", "v_phi2"):
    a.plot(t, col(name), label=name)
a.set_title("angular velocities (rad/s)")

a = ax[2][0]
a.plot(col("x"), col("y"))
a.set_aspect("equal", adjustable="datalim")
a.set_title("path in the x-y plane (m)")

ax[2][1].axis("off")
for a in (ax[0][0], ax[0][1], ax[1][0], ax[1][1]):
    a.set_xlabel("t (s)")
    a.legend(loc="best")
fig.suptitle("@NAME@")
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(HERE, "plots.png")
fig.savefig(out, dpi=120)
"#;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{rollout, IntegratorConfig};
    use crate::maneuver::{solve_maneuver, Builtin, ManeuverSpec, Waypoint};
    use crate::model::BaseState;
    use crate::shooting::ShootingConfig;

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn simulation_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = WipModel::default();
        let x0 = NodeState::new(GroupElement::new(0.1, -0.2, 0.3), BaseState::new(3.0, 0.0, 0.0), BaseVelocity::new(0.0, 5.0, 4.0));
        // swinging below the axle, which unlike the upright body does not fall
        let torques: Vec<Torque> = (0..20).map(|k| Torque::new(1e-3 * (k as f64).sin(), -2e-3)).collect();
        let nodes = rollout(&x0, &torques, &IntegratorConfig::with_step(0.05), &model).unwrap();
        write_simulation(dir.path(), 0.05, &nodes, &torques, &model).unwrap();
        let table = read_trajectory(&dir.path().join(TRAJECTORY_FILE)).unwrap();
        assert_eq!(table.nodes, nodes);
        assert_eq!(&table.torques[..20], &torques[..]);
        assert_eq!(read_torques(&dir.path().join(TRAJECTORY_FILE)).unwrap().len(), 21);
        let check = check_run(dir.path()).unwrap();
        assert!(check.passed(), "{check:?}");
        assert_eq!(check.max_step_deviation, 0.0);
    }

    #[test]
    fn optimization_artifacts_pass_the_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ManeuverSpec::builtin(Builtin::M2);
        spec.waypoints = vec![spec.waypoints[0], Waypoint { duration: 1.0, ..spec.waypoints[0] }, Waypoint { duration: 1.0, ..spec.waypoints[0] }];
        let model = WipModel::default();
        // straight roll: the end waypoints are what rolling reaches
        let start = spec.initial_state();
        let cfg = IntegratorConfig::with_step(spec.h);
        let end = rollout(&start, &[Torque::ZERO; 20], &cfg, &model).unwrap()[20];
        let end2 = rollout(&end, &[Torque::ZERO; 20], &cfg, &model).unwrap()[20];
        spec.waypoints[1].pose = end.g;
        spec.waypoints[2].pose = end2.g;
        let out = solve_maneuver(&spec, &ShootingConfig::default(), &model).unwrap();
        assert!(out.converged());
        let files = write_optimization(dir.path(), &out, &model).unwrap();
        assert!(files.plot.exists() && files.costates.exists());
        let summary = RunSummary::load(dir.path()).unwrap();
        assert_eq!(summary.leg.len(), 2);
        assert_eq!(summary.leg[1].offset, 20);
        let check = check_run(dir.path()).unwrap();
        assert!(check.passed(), "{check:?}");

        // a torque pushed past the bound is caught
        let path = dir.path().join(TRAJECTORY_FILE);
        let mut table = read_trajectory(&path).unwrap();
        table.torques[25].tau1 = 2.0 * spec.bounds.torque;
        let csv = trajectory_csv(&table.times, &table.nodes, &table.torques, &table.costates);
        write_atomic(&path, csv.as_bytes()).unwrap();
        let check = check_run(dir.path()).unwrap();
        assert!(check.legs[1].iter().any(|v| matches!(v, Violation::TorqueBound { index: 5, .. })), "{check:?}");
    }

    #[test]
    fn plot_script_handles_missing_bound() {
        let s = plot_script("M2", None);
        assert!(s.contains("TORQUE_BOUND = None"));
        assert!(plot_script("M1", Some(8e-3)).contains("TORQUE_BOUND = 8.0000000000000002e-3"));
    }
}

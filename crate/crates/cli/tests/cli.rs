//! End-to-end runs of the `wip` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wip() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wip"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn resting_simulation_writes_constant_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let init = write(tmp.path(), "rest.toml", "x = 0.0\ny = 0.0\ntheta_deg = 0.0\n");
    let out = tmp.path().join("run");
    let o = run(wip()
        .args(["simulate", "--params"])
        .arg(configs().join("params.toml"))
        .arg("--initial")
        .arg(&init)
        .args(["--steps", "10", "--out"])
        .arg(&out));
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split_once(',').unwrap().1.split_once(',').unwrap().1).collect();
    assert!(rows.iter().all(|r| *r == rows[0]), "rows differ");
    let o = run(wip().args(["check", "--report"]).arg(&out));
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn rolling_start_moves_forward() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(wip()
        .args(["simulate", "--params"])
        .arg(configs().join("params.toml"))
        .arg("--initial")
        .arg(configs().join("rolling.toml"))
        .args(["--steps", "20", "--out"])
        .arg(&out));
    assert!(o.status.success(), "{}", text(&o));
    let x = column(&std::fs::read_to_string(out.join("trajectory.csv")).unwrap(), "x");
    assert!(x.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn torque_file_is_replayed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut body = String::from("tau1,tau2\n");
    for k in 0..10 {
        body.push_str(&format!("{},{}\n", 1e-4 * k as f64, -1e-4));
    }
    let torques = write(tmp.path(), "tau.csv", &body);
    let out = tmp.path().join("run");
    let o = run(wip()
        .args(["simulate", "--params"])
        .arg(configs().join("params.toml"))
        .arg("--initial")
        .arg(configs().join("rolling.toml"))
        .arg("--torques")
        .arg(&torques)
        .args(["--steps", "10", "--out"])
        .arg(&out));
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(column(&csv, "tau1")[3], 1e-4 * 3.0);

    let o = run(wip()
        .args(["simulate", "--params"])
        .arg(configs().join("params.toml"))
        .arg("--initial")
        .arg(configs().join("rolling.toml"))
        .arg("--torques")
        .arg(&torques)
        .args(["--steps", "11", "--out"])
        .arg(&out));
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn missing_parameter_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(configs().join("params.toml")).unwrap();
    let broken: String = full.lines().filter(|l| !l.starts_with("r_w")).map(|l| format!("{l}\n")).collect();
    let params = write(tmp.path(), "params.toml", &broken);
    let o = run(wip()
        .args(["simulate", "--params"])
        .arg(&params)
        .arg("--initial")
        .arg(configs().join("rolling.toml"))
        .args(["--steps", "2", "--out"])
        .arg(tmp.path().join("run")));
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("r_w"), "{}", text(&o));
}

#[test]
fn falling_body_reports_the_step() {
    let tmp = tempfile::tempdir().unwrap();
    let init = write(tmp.path(), "tilted.toml", "x = 0.0\ny = 0.0\ntheta_deg = 0.0\nalpha_deg = 5.0\n");
    let o = run(wip()
        .args(["simulate", "--params"])
        .arg(configs().join("params.toml"))
        .arg("--initial")
        .arg(&init)
        .args(["--steps", "200", "--out"])
        .arg(tmp.path().join("run")));
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("step"), "{}", text(&o));
}

#[test]
fn m2_file_optimizes_and_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m2");
    let o = run(wip()
        .args(["optimize", "--params"])
        .arg(configs().join("params.toml"))
        .arg("--maneuver")
        .arg(configs().join("m2.toml"))
        .arg("--out")
        .arg(&out));
    let log = text(&o);
    assert!(o.status.success(), "{log}");
    assert!(log.contains("total cost") && log.contains("residual") && log.contains("iterations"), "{log}");
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    for name in ["tau1", "tau2"] {
        assert!(column(&csv, name).iter().all(|t| t.abs() <= 8e-3));
    }
    assert!(out.join("plot.py").exists() && out.join("residuals.csv").exists());
    let o = run(wip().args(["check", "--report"]).arg(&out));
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn unreachable_leg_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    // a metre sideways from rest in half a second is far outside the torque budget
    let maneuver = write(
        tmp.path(),
        "far.toml",
        "name = \"far\"\n[[waypoint]]\nx = 0.0\ny = 0.0\ntheta_deg = 0.0\n\
         [[waypoint]]\nx = 0.0\ny = 1.0\ntheta_deg = 0.0\nduration_s = 0.5\n",
    );
    let o = run(wip()
        .args(["optimize", "--params"])
        .arg(configs().join("params.toml"))
        .arg("--maneuver")
        .arg(&maneuver)
        .arg("--out")
        .arg(tmp.path().join("far")));
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
    assert!(text(&o).contains("leg 0 did not converge"), "{}", text(&o));
}

#[test]
fn bad_flags_exit_with_two() {
    let o = run(wip().args(["optimize", "--params", "p.toml", "--builtin", "M3", "--out", "x"]));
    assert_eq!(o.status.code(), Some(2));
    let o = run(wip().args(["optimize", "--params", "p.toml", "--out", "x"]));
    assert_eq!(o.status.code(), Some(2));
}

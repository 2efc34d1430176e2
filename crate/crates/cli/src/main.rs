//! `wip`: simulate the wheeled inverted pendulum, synthesize energy-optimal
//! maneuvers and re-check written runs.
//!
//! Exit codes:
//!
//! * 0 success
//! * 1 a check found violations, or an unexpected failure
//! * 2 an input file or flag could not be parsed; the message names the field
//! * 3 the integrator failed; the message names the step
//! * 4 a maneuver leg did not converge; the message names the leg and residual

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use wip_core::artifacts::{self, RunArtifacts};
use wip_core::integrator::{self, IntegratorConfig};
use wip_core::maneuver::{self, Builtin, ManeuverSpec};
use wip_core::model::{Torque, WipModel, WipParams};
use wip_core::shooting::ShootingConfig;
use wip_core::Error;

#[derive(Debug, Parser)]
#[command(name = "wip", version, about = "Wheeled inverted pendulum simulation and optimal maneuvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll the discrete dynamics forward under given torques.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        /// Initial state (x, y, theta_deg, alpha_deg, phi1_deg, phi2_deg, v_alpha, v_phi1, v_phi2).
        #[arg(long)]
        initial: PathBuf,
        /// CSV with `tau1`, `tau2` columns; zero torque when omitted.
        #[arg(long)]
        torques: Option<PathBuf>,
        #[arg(long)]
        steps: usize,
        /// Step length in seconds.
        #[arg(long, default_value_t = 0.05)]
        h: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve an energy-optimal maneuver leg by leg.
    Optimize(OptimizeArgs),
    /// Re-check the artifacts of a run.
    Check {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long, group = "source", required = true)]
    maneuver: Option<PathBuf>,
    #[arg(long, group = "source", required = true, value_parser = ["M1", "M2"])]
    builtin: Option<String>,
    /// Shooting segments per leg.
    #[arg(long)]
    segments: Option<usize>,
    /// Residual tolerance of the final smoothing stage.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// A failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    /// Classifies a library error; `context` says which input it came from.
    fn from_error(context: &str, e: Error) -> Self {
        let code = match e {
            Error::Parse(_) | Error::InvalidField { .. } | Error::MissingField(_) => 2,
            Error::Integrator { .. } => 3,
            _ => 1,
        };
        Self::new(code, format!("{context}: {e}"))
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(2, format!("cannot read {}: {e}", path.display())))
}

fn load_params(path: &Path) -> Result<WipModel, Failure> {
    let text = read(path)?;
    let params = WipParams::from_toml_str(&text).map_err(|e| Failure::from_error(&path.display().to_string(), e))?;
    Ok(WipModel::new(params))
}

fn simulate(
    params: &Path,
    initial: &Path,
    torques: Option<&Path>,
    steps: usize,
    h: f64,
    out: &Path,
) -> Result<RunArtifacts, Failure> {
    let model = load_params(params)?;
    let x0 = maneuver::state_from_toml_str(&read(initial)?).map_err(|e| Failure::from_error(&initial.display().to_string(), e))?;
    let torques = match torques {
        None => vec![Torque::ZERO; steps],
        Some(path) => {
            read(path)?;
            let mut t = artifacts::read_torques(path).map_err(|e| Failure::from_error(&path.display().to_string(), e))?;
            if t.len() < steps {
                return Err(Failure::new(
                    2,
                    format!("{}: field `tau1`/`tau2` has {} rows, {steps} steps requested", path.display(), t.len()),
                ));
            }
            t.truncate(steps);
            t
        }
    };
    let cfg = IntegratorConfig::with_step(h);
    cfg.validate().map_err(|e| Failure::from_error("--h", e))?;
    let nodes = integrator::rollout(&x0, &torques, &cfg, &model).map_err(|e| Failure::from_error("simulation", e))?;
    let files = artifacts::write_simulation(out, h, &nodes, &torques, &model).map_err(|e| Failure::from_error("writing output", e))?;
    let last = nodes.last().expect("rollout keeps the initial node");
    println!(
        "simulated {steps} steps: final pose ({:.6}, {:.6}, {:.6}) tilt {:.6} rad",
        last.g.x, last.g.y, last.g.theta, last.s.alpha
    );
    Ok(files)
}

fn optimize(args: &OptimizeArgs) -> Result<RunArtifacts, Failure> {
    let model = load_params(&args.params)?;
    let spec = match (&args.maneuver, &args.builtin) {
        (Some(path), _) => {
            ManeuverSpec::from_toml_str(&read(path)?).map_err(|e| Failure::from_error(&path.display().to_string(), e))?
        }
        (None, Some(name)) => {
            let which: Builtin = name.parse().map_err(|e| Failure::from_error("--builtin", e))?;
            ManeuverSpec::builtin(which)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let mut cfg = ShootingConfig { segments: args.segments, ..ShootingConfig::default() };
    if let Some(tol) = args.tol {
        cfg.tol_residual = tol;
    }
    let n_max = (0..spec.legs()).filter_map(|l| spec.steps(l).ok()).max().unwrap_or(2);
    cfg.validate(n_max).map_err(|e| Failure::from_error("solver flags", e))?;
    info!("solving {} with {} legs", spec.name, spec.legs());
    let outcome = maneuver::solve_maneuver(&spec, &cfg, &model).map_err(|e| Failure::from_error("optimization", e))?;
    let files = artifacts::write_optimization(&args.out, &outcome, &model).map_err(|e| Failure::from_error("writing output", e))?;
    for (i, leg) in outcome.legs.iter().enumerate() {
        let r = &leg.report;
        println!(
            "leg {i}: cost {:.9e} residual {:.3e} iterations {} converged {}",
            r.cost, r.final_residual, r.iterations, r.converged
        );
    }
    println!("total cost {:.9e} over {} of {} legs", outcome.total_cost(), outcome.legs.len(), spec.legs());
    if let Some((i, leg)) = outcome.legs.iter().enumerate().find(|(_, l)| !l.report.converged) {
        return Err(Failure::new(
            4,
            format!(
                "leg {i} did not converge: best residual {:.3e} (tolerance {:.1e})",
                leg.report.final_residual, leg.report.tol_residual
            ),
        ));
    }
    Ok(files)
}

fn check(dir: &Path) -> Result<(), Failure> {
    let report = artifacts::check_run(dir).map_err(|e| Failure::from_error(&dir.display().to_string(), e))?;
    for (i, violations) in report.legs.iter().enumerate() {
        if violations.is_empty() {
            println!("leg {i}: ok");
        }
        for v in violations {
            println!("leg {i}: {v:?}");
        }
    }
    if report.kind == "simulate" {
        println!("largest re-simulation deviation {:.3e}", report.max_step_deviation);
    }
    if report.passed() {
        println!("check passed");
        Ok(())
    } else {
        Err(Failure::new(1, "check found violations"))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { params, initial, torques, steps, h, out } => {
            simulate(&params, &initial, torques.as_deref(), steps, h, &out).map(|_| ())
        }
        Command::Optimize(args) => optimize(&args).map(|_| ()),
        Command::Check { report } => check(&report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("WIP_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

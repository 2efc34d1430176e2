//! The discrete-time dynamics and trajectory rollout.
//!
//! One step maps `(g_k, s_k, v_k)` and a torque to the next node:
//!
//! ```text
//! g_{k+1} = g_k exp(-h A v_k)
//! s_{k+1} = s_k + h v_k
//! M(a_{k+1}) v_{k+1} - h c(a_{k+1}, v_{k+1}) = M(a_k) v_k + h (0, tau1, tau2)
//! ```
//!
//! The last equation is implicit in `v_{k+1}` and is solved by Newton's method.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::model::{BaseState, BaseVelocity, Torque, WipModel};
use crate::se2::{self, GroupElement};

/// Full state of the robot at one time node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeState {
    pub g: GroupElement,
    pub s: BaseState,
    pub v: BaseVelocity,
}

impl NodeState {
    pub fn new(g: GroupElement, s: BaseState, v: BaseVelocity) -> Self {
        Self { g, s, v }
    }

    pub fn is_finite(&self) -> bool {
        self.g.is_finite()
            && self.s.to_vector().iter().all(|x| x.is_finite())
            && self.v.to_vector().iter().all(|x| x.is_finite())
    }

    /// `(x, y, theta, alpha, phi1, phi2, v_alpha, v_phi1, v_phi2)`.
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.g.x,
            self.g.y,
            self.g.theta,
            self.s.alpha,
            self.s.phi1,
            self.s.phi2,
            self.v.v_alpha,
            self.v.v_phi1,
            self.v.v_phi2,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            g: GroupElement::new(x[0], x[1], x[2]),
            s: BaseState::new(x[3], x[4], x[5]),
            v: BaseVelocity::new(x[6], x[7], x[8]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    /// Step length in seconds.
    pub h: f64,
    /// Absolute tolerance on the infinity norm of the momentum residual.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            h: 0.05,
            newton_tol: 1e-12,
            newton_max_iters: 50,
        }
    }
}

impl IntegratorConfig {
    pub fn with_step(h: f64) -> Self {
        Self { h, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::invalid("h", "must be > 0"));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::invalid("newton_tol", "must be > 0"));
        }
        if self.newton_max_iters == 0 {
            return Err(Error::invalid("newton_max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

/// Number of step-halving attempts per Newton iteration before giving up.
const MAX_HALVINGS: usize = 10;

fn velocity_residual(
    model: &WipModel,
    alpha_next: f64,
    rhs: &Vector3<f64>,
    v: &BaseVelocity,
    h: f64,
) -> Vector3<f64> {
    model.mass_matrix(alpha_next) * v.to_vector() - h * model.coriolis(alpha_next, v) - rhs
}

/// One extra Newton update on a converged iterate so that the returned
/// velocity is a smooth function of the inputs to rounding level, not merely
/// within the stopping tolerance. Finite-difference Jacobians downstream rely
/// on this.
fn polish(model: &WipModel, alpha_next: f64, v: BaseVelocity, r: &Vector3<f64>, h: f64) -> BaseVelocity {
    let jac = model.mass_matrix(alpha_next) - h * model.d_coriolis_d_v(alpha_next, &v);
    match jac.lu().solve(r) {
        Some(delta) if delta.iter().all(|d| d.is_finite()) => BaseVelocity::from_vector(&(v.to_vector() - delta)),
        _ => v,
    }
}

/// Solves `M(alpha_next) v - h c(alpha_next, v) = rhs` for `v`.
pub fn newton_solve_velocity(
    alpha_next: f64,
    rhs: &Vector3<f64>,
    v_guess: &BaseVelocity,
    cfg: &IntegratorConfig,
    model: &WipModel,
) -> Result<BaseVelocity> {
    newton_solve_velocity_logged(alpha_next, rhs, v_guess, cfg, model, None)
}

/// Like [`newton_solve_velocity`], optionally recording the residual norm of every iterate.
pub fn newton_solve_velocity_logged(
    alpha_next: f64,
    rhs: &Vector3<f64>,
    v_guess: &BaseVelocity,
    cfg: &IntegratorConfig,
    model: &WipModel,
    mut log: Option<&mut Vec<f64>>,
) -> Result<BaseVelocity> {
    let h = cfg.h;
    let mass = model.mass_matrix(alpha_next);
    let mut v = *v_guess;
    let mut r = velocity_residual(model, alpha_next, rhs, &v, h);
    let mut rnorm = r.amax();
    if let Some(l) = log.as_deref_mut() {
        l.push(rnorm);
    }
    for _ in 0..cfg.newton_max_iters {
        if rnorm <= cfg.newton_tol {
            return Ok(polish(model, alpha_next, v, &r, h));
        }
        let jac = mass - h * model.d_coriolis_d_v(alpha_next, &v);
        let delta = jac
            .lu()
            .solve(&r)
            .ok_or(Error::SingularJacobian { alpha: alpha_next })?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial = BaseVelocity::from_vector(&(v.to_vector() - step * delta));
            let rt = velocity_residual(model, alpha_next, rhs, &trial, h);
            let tn = rt.amax();
            if tn.is_finite() && (tn < rnorm || tn <= cfg.newton_tol) {
                v = trial;
                r = rt;
                rnorm = tn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if let Some(l) = log.as_deref_mut() {
            l.push(rnorm);
        }
        if !accepted {
            break;
        }
    }
    if rnorm <= cfg.newton_tol {
        Ok(polish(model, alpha_next, v, &r, h))
    } else {
        Err(Error::NewtonDivergence {
            iterations: cfg.newton_max_iters,
            residual: rnorm,
        })
    }
}

/// Pose increment over one step, `exp(-h A v)`.
pub fn group_increment(v: &BaseVelocity, h: f64, model: &WipModel) -> GroupElement {
    se2::exp(&model.body_twist(v), h)
}

/// Advances one node of the discrete dynamics.
pub fn step(x: &NodeState, tau: &Torque, cfg: &IntegratorConfig, model: &WipModel) -> Result<NodeState> {
    let h = cfg.h;
    let g = x.g.compose(&group_increment(&x.v, h, model));
    let s = BaseState::from_vector(&(x.s.to_vector() + h * x.v.to_vector()));
    let rhs = model.mass_matrix(x.s.alpha) * x.v.to_vector() + h * tau.embed();
    let v = newton_solve_velocity(s.alpha, &rhs, &x.v, cfg, model)?;
    Ok(NodeState { g, s, v })
}

/// Applies [`step`] once per torque; the result has `torques.len() + 1` nodes.
pub fn rollout(
    x0: &NodeState,
    torques: &[Torque],
    cfg: &IntegratorConfig,
    model: &WipModel,
) -> Result<Vec<NodeState>> {
    let mut traj = Vec::with_capacity(torques.len() + 1);
    traj.push(*x0);
    let mut x = *x0;
    for (k, tau) in torques.iter().enumerate() {
        if !tau.is_finite() {
            return Err(Error::Integrator {
                step: k,
                source: Box::new(Error::invalid("torque", "must be finite")),
            });
        }
        x = step(&x, tau, cfg, model).map_err(|e| Error::Integrator {
            step: k,
            source: Box::new(e),
        })?;
        traj.push(x);
    }
    Ok(traj)
}

/// Energy of every node minus the energy of the first node.
pub fn energy_drift(traj: &[NodeState], model: &WipModel) -> Vec<f64> {
    let energy = |x: &NodeState| model.constrained_energy(x.s.alpha, &x.v);
    let Some(first) = traj.first() else {
        return Vec::new();
    };
    let e0 = energy(first);
    traj.iter().map(|x| energy(x) - e0).collect()
}

/// Least-squares slope of a uniformly sampled series against its index.
pub fn regression_slope(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    if series.len() < 2 {
        return 0.0;
    }
    let mean_k = (n - 1.0) / 2.0;
    let mean_y = series.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, y) in series.iter().enumerate() {
        let dk = k as f64 - mean_k;
        sxy += dk * (y - mean_y);
        sxx += dk * dk;
    }
    sxy / sxx
}

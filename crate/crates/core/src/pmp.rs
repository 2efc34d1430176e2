//! First-order optimality conditions of the discrete energy-optimal control problem.
//!
//! The costate at node `k` is `(zeta, psi, lambda)`: `zeta` in se(2)* is the
//! multiplier of the pose update, `psi` of the shape update and `lambda` of the
//! momentum update. Between nodes the costate obeys
//!
//! ```text
//! zeta^k = Ad*_{exp(-h A v_k)} zeta^{k-1}
//!
//! | I    D_s(M v)^T | |psi^k   |   | sigma^k alpha_k e1               |   | I  D_s(M v - h c)^T | |psi^{k-1}   |
//! | h I  M^T        | |lambda^k| + | -h A^T J_r^T zeta^k + beta ⊙ v_k | = | 0  D_v(M v - h c)^T | |lambda^{k-1}|
//! ```
//!
//! evaluated at node `k`. `J_r` is the right Jacobian of the exponential at
//! `-h A v_k`; it accounts for the exact derivative of the pose update and is
//! the identity to first order in `h`.
//!
//! Normal extremals use `eta = -1`, for which the Hamiltonian is maximised by
//! the componentwise saturation `tau_j = sat_mu(lambda_{j+1})`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::integrator::{group_increment, NodeState};
use crate::model::{BaseVelocity, Torque, WipModel};
use crate::se2::{self, CoAlgebraElement};
use crate::shooting::OcProblem;

/// Costate at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeCostate {
    pub zeta: CoAlgebraElement,
    pub psi: Vector3<f64>,
    pub lambda: Vector3<f64>,
}

impl NodeCostate {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.zeta.px,
            self.zeta.py,
            self.zeta.pz,
            self.psi[0],
            self.psi[1],
            self.psi[2],
            self.lambda[0],
            self.lambda[1],
            self.lambda[2],
        ]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            zeta: CoAlgebraElement::new(x[0], x[1], x[2]),
            psi: Vector3::new(x[3], x[4], x[5]),
            lambda: Vector3::new(x[6], x[7], x[8]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Multipliers of the tilt and velocity constraints at one node. Both are non-positive.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Multipliers {
    pub sigma: f64,
    pub beta: Vector3<f64>,
}

impl Multipliers {
    pub fn to_array(&self) -> [f64; 4] {
        [self.sigma, self.beta[0], self.beta[1], self.beta[2]]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            sigma: x[0],
            beta: Vector3::new(x[1], x[2], x[3]),
        }
    }
}

/// Box bounds of the problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    /// Torque bound `mu`.
    pub torque: f64,
    /// Bound `nu` on every component of the shape velocity.
    pub velocity: f64,
    /// Tilt bound `a`.
    pub tilt: f64,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("mu", self.torque), ("nu", self.velocity), ("a", self.tilt)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(name, format!("bound must be > 0, got {value}")));
            }
        }
        Ok(())
    }
}

/// Cost multiplier of the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extremal {
    /// `eta = -1`.
    Normal,
    /// `eta = 0`.
    Abnormal,
}

impl Extremal {
    pub fn eta(self) -> f64 {
        match self {
            Extremal::Normal => -1.0,
            Extremal::Abnormal => 0.0,
        }
    }
}

/// `H = (eta h / 2)|tau|^2 - <zeta, h A v> + <psi, s + h v> + <lambda, M v + h tau>`.
pub fn hamiltonian(
    cost: &NodeCostate,
    x: &NodeState,
    tau: &Torque,
    extremal: Extremal,
    h: f64,
    model: &WipModel,
) -> f64 {
    let v = x.v.to_vector();
    let running = 0.5 * extremal.eta() * h * tau.norm_squared();
    let group = -cost.zeta.to_vector().dot(&(h * model.connection() * v));
    let shape = cost.psi.dot(&(x.s.to_vector() + h * v));
    let momentum = cost.lambda.dot(&(model.mass_matrix(x.s.alpha) * v + h * tau.embed()));
    running + group + shape + momentum
}

/// Gradient of the Hamiltonian with respect to the two torques.
pub fn hamiltonian_torque_gradient(cost: &NodeCostate, tau: &Torque, extremal: Extremal, h: f64) -> [f64; 2] {
    let eta = extremal.eta();
    [
        eta * h * tau.tau1 + h * cost.lambda[1],
        eta * h * tau.tau2 + h * cost.lambda[2],
    ]
}

/// Maximiser of the Hamiltonian over `|tau|_inf <= mu`.
///
/// The abnormal law is set-valued at `lambda_{j+1} = 0`; zero is returned there.
pub fn optimal_torque(lambda: &Vector3<f64>, mu: f64, extremal: Extremal) -> Torque {
    let law = |l: f64| match extremal {
        Extremal::Normal => l.clamp(-mu, mu),
        Extremal::Abnormal => {
            if l > 0.0 {
                mu
            } else if l < 0.0 {
                -mu
            } else {
                0.0
            }
        }
    };
    Torque::new(law(lambda[1]), law(lambda[2]))
}

/// Forward transport `zeta^k = Ad*_{exp(-h A v_k)} zeta^{k-1}`.
pub fn costate_transport_zeta(
    zeta_prev: &CoAlgebraElement,
    v: &BaseVelocity,
    h: f64,
    model: &WipModel,
) -> CoAlgebraElement {
    se2::coadjoint(&group_increment(v, h, model), zeta_prev)
}

/// Backward transport `zeta^{k-1} = Ad*_{exp(h A v_k)} zeta^k`.
pub fn costate_transport_zeta_back(
    zeta: &CoAlgebraElement,
    v: &BaseVelocity,
    h: f64,
    model: &WipModel,
) -> CoAlgebraElement {
    se2::coadjoint(&group_increment(v, h, model).inverse(), zeta)
}

/// The matrices of the linear adjoint system at one node.
#[derive(Debug, Clone, Copy)]
pub struct AdjointBlocks {
    /// Left-hand matrix acting on `(psi^k, lambda^k)`.
    pub lhs: Matrix6<f64>,
    /// Right-hand matrix acting on `(psi^{k-1}, lambda^{k-1})`.
    pub rhs: Matrix6<f64>,
    /// Constant term on the left: constraint multipliers and the `zeta^k` coupling.
    pub forcing: Vector6<f64>,
}

/// `D_s(M v)` and `D_s(M v - h c)`: only the tilt column is non-zero.
fn shape_derivatives(x: &NodeState, h: f64, model: &WipModel) -> (Matrix3<f64>, Matrix3<f64>) {
    let alpha = x.s.alpha;
    let dm_v = model.d_mass_d_alpha(alpha) * x.v.to_vector();
    let dc = model.d_coriolis_d_alpha(alpha, &x.v);
    let mut d_mv = Matrix3::zeros();
    d_mv.set_column(0, &dm_v);
    let mut d_f = Matrix3::zeros();
    d_f.set_column(0, &(dm_v - h * dc));
    (d_mv, d_f)
}

pub fn adjoint_blocks(
    zeta: &CoAlgebraElement,
    x: &NodeState,
    mult: &Multipliers,
    h: f64,
    model: &WipModel,
) -> AdjointBlocks {
    let alpha = x.s.alpha;
    let mass = model.mass_matrix(alpha);
    let (d_mv, d_f) = shape_derivatives(x, h, model);
    let d_v = mass - h * model.d_coriolis_d_v(alpha, &x.v);

    let mut lhs = Matrix6::zeros();
    lhs.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    lhs.fixed_view_mut::<3, 3>(0, 3).copy_from(&d_mv.transpose());
    lhs.fixed_view_mut::<3, 3>(3, 0).copy_from(&(h * Matrix3::identity()));
    lhs.fixed_view_mut::<3, 3>(3, 3).copy_from(&mass.transpose());

    let mut rhs = Matrix6::zeros();
    rhs.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    rhs.fixed_view_mut::<3, 3>(0, 3).copy_from(&d_f.transpose());
    rhs.fixed_view_mut::<3, 3>(3, 3).copy_from(&d_v.transpose());

    let xi = model.body_twist(&x.v).scale(h);
    let jr = se2::right_jacobian(&xi);
    let group = -h * model.connection().transpose() * jr.transpose() * zeta.to_vector();
    let v = x.v.to_vector();
    let schur = mult.beta.component_mul(&v);
    let mut forcing = Vector6::zeros();
    forcing[0] = mult.sigma * alpha;
    forcing.fixed_rows_mut::<3>(3).copy_from(&(group + schur));

    AdjointBlocks { lhs, rhs, forcing }
}

fn stack(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(a[0], a[1], a[2], b[0], b[1], b[2])
}

/// Advances the costate from node `k-1` to node `k`, where `x` is the state at node `k`.
pub fn adjoint_step(
    cost_prev: &NodeCostate,
    x: &NodeState,
    mult: &Multipliers,
    h: f64,
    model: &WipModel,
) -> Result<NodeCostate> {
    let zeta = costate_transport_zeta(&cost_prev.zeta, &x.v, h, model);
    let blocks = adjoint_blocks(&zeta, x, mult, h, model);
    let b = blocks.rhs * stack(&cost_prev.psi, &cost_prev.lambda) - blocks.forcing;
    let sol = blocks.lhs.lu().solve(&b).ok_or(Error::SingularAdjointSystem {
        condition: f64::INFINITY,
    })?;
    if !sol.iter().all(|s| s.is_finite()) {
        let sv = blocks.lhs.singular_values();
        return Err(Error::SingularAdjointSystem {
            condition: sv.max() / sv.min(),
        });
    }
    Ok(NodeCostate {
        zeta,
        psi: sol.fixed_rows::<3>(0).into_owned(),
        lambda: sol.fixed_rows::<3>(3).into_owned(),
    })
}

/// Residual of the adjoint relations between two consecutive costates (zeta rows first).
pub fn adjoint_residual(
    cost_prev: &NodeCostate,
    cost: &NodeCostate,
    x: &NodeState,
    mult: &Multipliers,
    h: f64,
    model: &WipModel,
) -> [f64; 9] {
    let zeta_pred = costate_transport_zeta(&cost_prev.zeta, &x.v, h, model);
    let blocks = adjoint_blocks(&cost.zeta, x, mult, h, model);
    let r = blocks.lhs * stack(&cost.psi, &cost.lambda) + blocks.forcing
        - blocks.rhs * stack(&cost_prev.psi, &cost_prev.lambda);
    let dz = (cost.zeta - zeta_pred).to_vector();
    [dz[0], dz[1], dz[2], r[0], r[1], r[2], r[3], r[4], r[5]]
}

/// Costate attached to the final node.
///
/// `zeta` and `lambda` are carried over from node `N-1`; `psi^N` is the
/// shape-update row evaluated with no momentum multiplier beyond the horizon,
/// so that `psi^N_2, psi^N_3` are the multipliers of the free final wheel angles.
pub fn terminal_costate(cost_last: &NodeCostate, x_final: &NodeState, h: f64, model: &WipModel) -> NodeCostate {
    let (_, d_f) = shape_derivatives(x_final, h, model);
    NodeCostate {
        zeta: cost_last.zeta,
        psi: cost_last.psi + d_f.transpose() * cost_last.lambda,
        lambda: cost_last.lambda,
    }
}

/// `(psi^N_2, psi^N_3)`; zero when the free final wheel angles are transversal.
pub fn transversality_residual(cost_final: &NodeCostate) -> [f64; 2] {
    [cost_final.psi[1], cost_final.psi[2]]
}

/// Smoothed Fischer-Burmeister function `p + q - sqrt(p^2 + q^2 + eps^2)`.
pub fn fischer_burmeister(p: f64, q: f64, eps: f64) -> f64 {
    let sum = p + q;
    let root = p.hypot(q).hypot(eps);
    if sum > 0.0 {
        // cancellation-free when both arguments are large and positive
        (2.0 * p * q - eps * eps) / (sum + root)
    } else {
        sum - root
    }
}

/// Partial derivatives of [`fischer_burmeister`] in `p` and `q`.
pub fn fischer_burmeister_grad(p: f64, q: f64, eps: f64) -> (f64, f64) {
    let root = p.hypot(q).hypot(eps);
    (1.0 - p / root, 1.0 - q / root)
}

/// Arguments `(p, q)` of the complementarity functions for the tilt bound
/// and the three velocity bounds: the negated multiplier and the slack.
pub fn complementarity_args(x: &NodeState, mult: &Multipliers, bounds: &Bounds) -> [(f64, f64); 4] {
    let v = x.v.to_vector();
    let a2 = bounds.tilt * bounds.tilt;
    let n2 = bounds.velocity * bounds.velocity;
    [
        (-mult.sigma, a2 - x.s.alpha * x.s.alpha),
        (-mult.beta[0], n2 - v[0] * v[0]),
        (-mult.beta[1], n2 - v[1] * v[1]),
        (-mult.beta[2], n2 - v[2] * v[2]),
    ]
}

/// Complementarity residuals for the tilt bound and the three velocity bounds.
pub fn complementarity_residual(x: &NodeState, mult: &Multipliers, bounds: &Bounds, eps: f64) -> [f64; 4] {
    complementarity_args(x, mult, bounds).map(|(p, q)| fischer_burmeister(p, q, eps))
}

/// Per-family infinity norms of the first-order conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktBreakdown {
    pub dynamics: f64,
    pub adjoint: f64,
    pub terminal_costate: f64,
    pub transversality: f64,
    pub complementarity: f64,
    pub boundary: f64,
    pub stationarity: f64,
}

impl KktBreakdown {
    pub fn max(&self) -> f64 {
        [
            self.dynamics,
            self.adjoint,
            self.terminal_costate,
            self.transversality,
            self.complementarity,
            self.boundary,
            self.stationarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn amax(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Residual of the discrete dynamics between two nodes, without solving for the step.
pub fn dynamics_residual(x: &NodeState, next: &NodeState, tau: &Torque, h: f64, model: &WipModel) -> [f64; 9] {
    let pred = x.g.compose(&group_increment(&x.v, h, model));
    let dg = se2::log_wrapped(&pred.inverse().compose(&next.g)).to_vector();
    let ds = next.s.to_vector() - x.s.to_vector() - h * x.v.to_vector();
    let dz = model.mass_matrix(next.s.alpha) * next.v.to_vector()
        - h * model.coriolis(next.s.alpha, &next.v)
        - model.mass_matrix(x.s.alpha) * x.v.to_vector()
        - h * tau.embed();
    [dg[0], dg[1], dg[2], ds[0], ds[1], ds[2], dz[0], dz[1], dz[2]]
}

/// Every first-order condition of the problem, family by family.
///
/// `trajectory` and `costates` have `N + 1` entries, `torques` `N`, and
/// `multipliers` `N + 1` (the first and last are ignored).
pub fn kkt_breakdown(
    trajectory: &[NodeState],
    costates: &[NodeCostate],
    multipliers: &[Multipliers],
    torques: &[Torque],
    problem: &OcProblem,
    model: &WipModel,
) -> KktBreakdown {
    let n = problem.n_steps;
    let h = problem.h;
    if trajectory.len() != n + 1 || costates.len() != n + 1 || torques.len() != n || multipliers.len() != n + 1 {
        return KktBreakdown {
            dynamics: f64::INFINITY,
            ..KktBreakdown::default()
        };
    }
    let mut out = KktBreakdown::default();
    for k in 0..n {
        let r = dynamics_residual(&trajectory[k], &trajectory[k + 1], &torques[k], h, model);
        out.dynamics = out.dynamics.max(amax(r));
        let best = optimal_torque(&costates[k].lambda, problem.bounds.torque, Extremal::Normal);
        let gap = h * (best.tau1 - torques[k].tau1).abs().max((best.tau2 - torques[k].tau2).abs());
        out.stationarity = out.stationarity.max(gap);
        // the bound itself is part of the maximisation
        let excess = (torques[k].norm_inf() - problem.bounds.torque).max(0.0);
        out.stationarity = out.stationarity.max(excess);
    }
    for k in 1..n {
        let r = adjoint_residual(&costates[k - 1], &costates[k], &trajectory[k], &multipliers[k], h, model);
        out.adjoint = out.adjoint.max(amax(r));
        let c = complementarity_residual(&trajectory[k], &multipliers[k], &problem.bounds, 0.0);
        out.complementarity = out.complementarity.max(amax(c));
    }
    let term = terminal_costate(&costates[n - 1], &trajectory[n], h, model);
    let dt = term.to_array().iter().zip(costates[n].to_array()).map(|(a, b)| a - b).collect::<Vec<_>>();
    out.terminal_costate = amax(dt);
    out.transversality = amax(transversality_residual(&costates[n]));
    out.boundary = amax(problem.boundary_residual(&trajectory[0], &trajectory[n]));
    out
}

/// Infinity norm over all families of [`kkt_breakdown`].
pub fn kkt_residual(
    trajectory: &[NodeState],
    costates: &[NodeCostate],
    multipliers: &[Multipliers],
    torques: &[Torque],
    problem: &OcProblem,
    model: &WipModel,
) -> f64 {
    kkt_breakdown(trajectory, costates, multipliers, torques, problem, model).max()
}

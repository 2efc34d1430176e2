//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls the solver; the oracles only reuse the model's mass
//! matrix and curvature term, whose derivatives and structure are checked on
//! their own.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use wip_core::integrator::{self, IntegratorConfig, NodeState};
use wip_core::model::{BaseState, BaseVelocity, Torque, WipModel, WipParams};
use wip_core::se2::{self, AlgebraElement, GroupElement};
use wip_core::shooting::OcProblem;

/// `[xi]^` as a homogeneous 3x3 matrix.
pub fn hat(xi: &AlgebraElement) -> Matrix3<f64> {
    Matrix3::new(0.0, -xi.omega, xi.vx, xi.omega, 0.0, xi.vy, 0.0, 0.0, 0.0)
}

pub fn homogeneous(g: &GroupElement) -> Matrix3<f64> {
    let (s, c) = g.theta.sin_cos();
    Matrix3::new(c, -s, g.x, s, c, g.y, 0.0, 0.0, 1.0)
}

/// Matrix exponential of `t [xi]^` by scaling and squaring of a Taylor series.
pub fn expm(xi: &AlgebraElement, t: f64) -> Matrix3<f64> {
    let a = hat(xi) * t;
    let norm = a.abs().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = a / 2f64.powi(squarings);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..30 {
        term = term * a / k as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// The Lagrangian in spatial coordinates `(x, y, theta, alpha, phi1, phi2)`
/// and their rates, with the same constants as the reduced one.
pub fn spatial_lagrangian(p: &WipParams, q: &[f64; 6], vq: &[f64; 6]) -> f64 {
    let (theta, alpha) = (q[2], q[3]);
    let [vx, vy, vth, va, v1, v2] = *vq;
    let c_x = 0.5 * (p.m_b + 2.0 * p.m_w);
    let i_theta = 2.0 * p.i_wzz
        + p.i_bzz * alpha.cos().powi(2)
        + 2.0 * p.m_w * p.d_w * p.d_w
        + (p.i_bxx + p.m_b * p.b * p.b) * alpha.sin().powi(2);
    let c_t = 0.25 * i_theta;
    let c_a = 0.5 * (p.i_byy + p.m_b * p.b * p.b);
    let c_p = 0.5 * p.i_wyy;
    let c_ax = p.m_b * p.b;
    let (sa, ca) = alpha.sin_cos();
    let (st, ct) = theta.sin_cos();
    c_x * (vx * vx + vy * vy) + c_t * vth * vth + c_a * va * va + c_p * (v1 * v1 + v2 * v2)
        + c_ax * (ca * ct * va * vx - sa * st * vx * vth)
        + c_ax * (sa * ct * vth * vy + ca * st * va * vy - p.grav * ca)
}

/// Explicit Euler on `(g, s, M(alpha) v)` with the same curvature term and
/// the continuous reconstruction `g' = g (-A v)`.
pub fn forward_euler(model: &WipModel, x0: &NodeState, steps: usize, h: f64) -> Vec<NodeState> {
    let mut out = vec![*x0];
    let mut x = *x0;
    for _ in 0..steps {
        let v = x.v.to_vector();
        let xi = -(model.connection() * v);
        let (s, c) = x.g.theta.sin_cos();
        let g = GroupElement::new(x.g.x + h * (c * xi[0] - s * xi[1]), x.g.y + h * (s * xi[0] + c * xi[1]), x.g.theta + h * xi[2]);
        let momentum = model.mass_matrix(x.s.alpha) * v + h * model.coriolis(x.s.alpha, &x.v);
        let s_next = BaseState::from_vector(&(x.s.to_vector() + h * v));
        let v_next = model.mass_matrix(s_next.alpha).lu().solve(&momentum).expect("mass matrix is invertible");
        x = NodeState::new(g, s_next, BaseVelocity::from_vector(&v_next));
        out.push(x);
    }
    out
}

/// Least-squares slope against the sample index.
pub fn slope(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let (sx, sy) = ((n - 1.0) * n / 2.0, series.iter().sum::<f64>());
    let sxx: f64 = (0..series.len()).map(|k| (k * k) as f64).sum();
    let sxy: f64 = series.iter().enumerate().map(|(k, y)| k as f64 * y).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Energy `1/2 v^T M v + c_ax g cos(alpha)` from the printed mass matrix.
pub fn energy(model: &WipModel, x: &NodeState) -> f64 {
    let v = x.v.to_vector();
    let p = &model.params;
    0.5 * v.dot(&(model.mass_matrix(x.s.alpha) * v)) + p.m_b * p.b * p.grav * x.s.alpha.cos()
}

pub fn random_group<R: Rng>(rng: &mut R, span: f64) -> GroupElement {
    GroupElement::new(rng.random_range(-span..span), rng.random_range(-span..span), rng.random_range(-3.0..3.0))
}

fn state_vec(x: &NodeState) -> DVector<f64> {
    DVector::from_row_slice(&x.to_array())
}

/// Central-difference Jacobians of one integrator step.
pub fn step_jacobians(x: &NodeState, tau: &Torque, cfg: &IntegratorConfig, model: &WipModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = 1e-6;
    let f = |z: &[f64], t: &Torque| state_vec(&integrator::step(&NodeState::from_slice(z), t, cfg, model).unwrap());
    let z0 = x.to_array();
    let mut a = DMatrix::zeros(9, 9);
    for j in 0..9 {
        let (mut zp, mut zm) = (z0, z0);
        zp[j] += d;
        zm[j] -= d;
        a.set_column(j, &((f(&zp, tau) - f(&zm, tau)) / (2.0 * d)));
    }
    let mut b = DMatrix::zeros(9, 2);
    for j in 0..2 {
        let mut tp = [tau.tau1, tau.tau2];
        let mut tm = tp;
        tp[j] += d;
        tm[j] -= d;
        let col = (f(&z0, &Torque::new(tp[0], tp[1])) - f(&z0, &Torque::new(tm[0], tm[1]))) / (2.0 * d);
        b.set_column(j, &col);
    }
    (a, b)
}

/// Rows of the terminal condition: pose, tilt and the three rates.
const TERMINAL_ROWS: [usize; 7] = [0, 1, 2, 3, 6, 7, 8];

/// Minimum-energy torques of the model linearised about the zero-torque
/// trajectory from `x0`, steering the terminal state by `delta` (pose, tilt
/// and rates, in that order).
pub fn lq_torques(model: &WipModel, x0: &NodeState, n: usize, h: f64, delta: &[f64; 7]) -> Vec<Torque> {
    let cfg = IntegratorConfig::with_step(h);
    let nominal = integrator::rollout(x0, &vec![Torque::ZERO; n], &cfg, model).unwrap();
    let jac: Vec<_> = (0..n).map(|k| step_jacobians(&nominal[k], &Torque::ZERO, &cfg, model)).collect();
    // G maps the stacked torques to the terminal deviation
    let mut g = DMatrix::zeros(9, 2 * n);
    let mut phi = DMatrix::<f64>::identity(9, 9);
    for k in (0..n).rev() {
        let col = &phi * &jac[k].1;
        g.view_mut((0, 2 * k), (9, 2)).copy_from(&col);
        phi = &phi * &jac[k].0;
    }
    let cg = DMatrix::from_fn(7, 2 * n, |i, j| g[(TERMINAL_ROWS[i], j)]);
    let gram = &cg * cg.transpose();
    let y = gram.lu().solve(&DVector::from_row_slice(delta)).expect("controllable linearisation");
    let tau = cg.transpose() * y;
    (0..n).map(|k| Torque::new(tau[2 * k], tau[2 * k + 1])).collect()
}

/// Terminal target of [`lq_torques`] for the nonlinear problem.
pub fn lq_target(model: &WipModel, x0: &NodeState, n: usize, h: f64, delta: &[f64; 7]) -> (GroupElement, f64, BaseVelocity) {
    let cfg = IntegratorConfig::with_step(h);
    let end = integrator::rollout(x0, &vec![Torque::ZERO; n], &cfg, model).unwrap()[n];
    let g = GroupElement::new(end.g.x + delta[0], end.g.y + delta[1], end.g.theta + delta[2]);
    let v = BaseVelocity::new(end.v.v_alpha + delta[4], end.v.v_phi1 + delta[5], end.v.v_phi2 + delta[6]);
    (g, end.s.alpha + delta[3], v)
}

/// Residual of one step of the discrete dynamics, written out from the
/// update equations rather than through the integrator's solver.
fn defect(model: &WipModel, h: f64, x: &NodeState, next: &NodeState, tau: &Torque) -> [f64; 9] {
    let xi = -(model.connection() * x.v.to_vector());
    let predicted = x.g.compose(&se2::exp(&AlgebraElement::from_vector(&xi), h));
    let pose = se2::log_wrapped(&predicted.inverse().compose(&next.g));
    let shape = next.s.to_vector() - x.s.to_vector() - h * x.v.to_vector();
    let vel = model.mass_matrix(next.s.alpha) * next.v.to_vector() - h * model.coriolis(next.s.alpha, &next.v)
        - model.mass_matrix(x.s.alpha) * x.v.to_vector()
        - h * tau.embed();
    [pose.vx, pose.vy, pose.omega, shape[0], shape[1], shape[2], vel[0], vel[1], vel[2]]
}

fn terminal(problem: &OcProblem, last: &NodeState) -> [f64; 7] {
    let pose = se2::log_wrapped(&problem.final_g.inverse().compose(&last.g));
    let v = last.v.to_vector() - problem.final_v.to_vector();
    [pose.vx, pose.vy, pose.omega, last.s.alpha - problem.final_alpha, v[0], v[1], v[2]]
}

/// Symmetric positive definite band matrix stored by lower diagonals.
struct Band {
    n: usize,
    width: usize,
    // a[i][d] = A[i][i - d]
    a: Vec<Vec<f64>>,
}

impl Band {
    fn new(n: usize, width: usize) -> Self {
        Self { n, width, a: vec![vec![0.0; width + 1]; n] }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.width, "entry outside the band");
        self.a[i][i - j] += v;
    }

    /// Solves `A x = b` by Cholesky, or `None` if `A` is not positive definite.
    fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        let (n, w) = (self.n, self.width);
        let mut l = self.a.clone();
        for i in 0..n {
            for d in (0..=w.min(i)).rev() {
                let j = i - d;
                let mut sum = l[i][d];
                for k in j.saturating_sub(w).max(i.saturating_sub(w))..j {
                    sum -= l[i][i - k] * l[j][j - k];
                }
                if d == 0 {
                    if sum.is_nan() || sum <= 0.0 {
                        return None;
                    }
                    l[i][0] = sum.sqrt();
                } else {
                    l[i][d] = sum / l[j][0];
                }
            }
        }
        let mut y = b.to_vec();
        for i in 0..n {
            for k in i.saturating_sub(w)..i {
                y[i] -= l[i][i - k] * y[k];
            }
            y[i] /= l[i][0];
        }
        for i in (0..n).rev() {
            for k in i + 1..(i + w + 1).min(n) {
                y[i] -= l[k][k - i] * y[k];
            }
            y[i] /= l[i][0];
        }
        Some(y)
    }
}

/// Unknowns per step: the torque followed by the next node.
const BLOCK: usize = 11;

/// Direct transcription with quadratic penalties on the dynamics and the
/// terminal condition, minimised by Levenberg-Marquardt on banded normal
/// equations.
///
/// Starting from `guess` (nodes `0..=N`), the terminal target is moved in
/// `stages` equal steps from the guess's last node to the problem's. The
/// problem's bounds are not imposed, so the result only means something when
/// they are inactive. Returns the torques, the cost `sum (h/2)|tau|^2` and
/// the largest remaining defect.
pub fn penalty_oracle(problem: &OcProblem, model: &WipModel, guess: &[NodeState], weight: f64, stages: usize) -> (Vec<Torque>, f64, f64) {
    let n = problem.n_steps;
    let h = problem.h;
    let x0 = problem.initial;
    let len = BLOCK * n;
    let mut z = vec![0.0; len];
    for k in 0..n {
        z[BLOCK * k + 2..BLOCK * (k + 1)].copy_from_slice(&guess[k + 1].to_array());
    }
    let node = |z: &[f64], k: usize| if k == 0 { x0 } else { NodeState::from_slice(&z[BLOCK * (k - 1) + 2..BLOCK * k]) };
    let torque = |z: &[f64], k: usize| Torque::new(z[BLOCK * k], z[BLOCK * k + 1]);
    let (sw, sh) = (weight.sqrt(), h.sqrt());
    let start = guess[n];

    let mut target = *problem;
    for stage in 1..=stages {
        let t = stage as f64 / stages as f64;
        let lerp = |a: f64, b: f64| a + t * (b - a);
        target.final_g = GroupElement::new(lerp(start.g.x, problem.final_g.x), lerp(start.g.y, problem.final_g.y), lerp(start.g.theta, problem.final_g.theta));
        target.final_alpha = lerp(start.s.alpha, problem.final_alpha);
        target.final_v = BaseVelocity::from_vector(&(start.v.to_vector() + t * (problem.final_v.to_vector() - start.v.to_vector())));

        // sparse rows: (column, value) lists with their residuals
        let rows = |z: &[f64]| {
            let mut out: Vec<(f64, Vec<(usize, f64)>)> = Vec::with_capacity(11 * n + 7);
            let d = 1e-7;
            for k in 0..n {
                let cols: Vec<usize> = if k == 0 { (0..BLOCK).collect() } else { (BLOCK * (k - 1) + 2..BLOCK * (k + 1)).collect() };
                let r0 = defect(model, h, &node(z, k), &node(z, k + 1), &torque(z, k));
                let mut jac = vec![[0.0; 9]; cols.len()];
                let mut zp = z.to_vec();
                for (c, &col) in cols.iter().enumerate() {
                    zp[col] = z[col] + d;
                    let rp = defect(model, h, &node(&zp, k), &node(&zp, k + 1), &torque(&zp, k));
                    zp[col] = z[col] - d;
                    let rm = defect(model, h, &node(&zp, k), &node(&zp, k + 1), &torque(&zp, k));
                    zp[col] = z[col];
                    for i in 0..9 {
                        jac[c][i] = (rp[i] - rm[i]) / (2.0 * d);
                    }
                }
                for i in 0..9 {
                    out.push((sw * r0[i], cols.iter().enumerate().map(|(c, &col)| (col, sw * jac[c][i])).collect()));
                }
                out.push((sh * z[BLOCK * k], vec![(BLOCK * k, sh)]));
                out.push((sh * z[BLOCK * k + 1], vec![(BLOCK * k + 1, sh)]));
            }
            let cols: Vec<usize> = (BLOCK * (n - 1) + 2..len).collect();
            let r0 = terminal(&target, &node(z, n));
            let mut zp = z.to_vec();
            let mut jac = vec![[0.0; 7]; cols.len()];
            for (c, &col) in cols.iter().enumerate() {
                zp[col] = z[col] + d;
                let rp = terminal(&target, &node(&zp, n));
                zp[col] = z[col] - d;
                let rm = terminal(&target, &node(&zp, n));
                zp[col] = z[col];
                for i in 0..7 {
                    jac[c][i] = (rp[i] - rm[i]) / (2.0 * d);
                }
            }
            for i in 0..7 {
                out.push((sw * r0[i], cols.iter().enumerate().map(|(c, &col)| (col, sw * jac[c][i])).collect()));
            }
            out
        };
        let objective = |z: &[f64]| -> f64 {
            let mut sum = 0.0;
            for k in 0..n {
                let d = defect(model, h, &node(z, k), &node(z, k + 1), &torque(z, k));
                sum += weight * d.iter().map(|x| x * x).sum::<f64>() + h * torque(z, k).norm_squared();
            }
            sum + weight * terminal(&target, &node(z, n)).iter().map(|x| x * x).sum::<f64>()
        };
        let mut damping: f64 = 1e-8;
        let mut f = objective(&z);
        for _ in 0..50 {
            let system = rows(&z);
            let mut jtj = Band::new(len, 2 * BLOCK);
            let mut jtr = vec![0.0; len];
            for (r, entries) in &system {
                for &(i, a) in entries {
                    jtr[i] -= a * r;
                    for &(j, b) in entries {
                        if j <= i {
                            jtj.add(i, j, a * b);
                        }
                    }
                }
            }
            let mut accepted = false;
            while damping < 1e10 {
                let mut damped = Band { n: len, width: jtj.width, a: jtj.a.clone() };
                for i in 0..len {
                    damped.a[i][0] += damping * (1.0 + jtj.a[i][0]);
                }
                let Some(dz) = damped.solve(&jtr) else {
                    damping *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
                let ft = objective(&trial);
                if ft < f {
                    let gain = (f - ft) / f;
                    z = trial;
                    f = ft;
                    damping = (damping * 0.1).max(1e-12);
                    accepted = gain > 1e-14;
                    break;
                }
                damping *= 10.0;
            }
            if !accepted {
                break;
            }
        }
    }
    let torques: Vec<Torque> = (0..n).map(|k| torque(&z, k)).collect();
    let cost = torques.iter().map(|t| 0.5 * h * t.norm_squared()).sum();
    let infeasibility = (0..n)
        .flat_map(|k| defect(model, h, &node(&z, k), &node(&z, k + 1), &torque(&z, k)))
        .chain(terminal(problem, &node(&z, n)))
        .fold(0.0f64, |m, x| m.max(x.abs()));
    (torques, cost, infeasibility)
}

/// Tilt-axis and wheel vector `(0, tau1, tau2)` helper for derivative checks.
pub fn torque_vec(t: &Torque) -> Vector3<f64> {
    Vector3::new(0.0, t.tau1, t.tau2)
}

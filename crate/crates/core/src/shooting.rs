//! Multiple shooting for the first-order optimality system.
//!
//! The horizon `0..N` is cut into segments starting at `floor(j N / S)`. The
//! unknowns are, in order:
//!
//! 1. for every segment `j`: the state at its first node (only for `j > 0`,
//!    9 values) followed by the costate at that node (9 values);
//! 2. the constraint multipliers `(sigma, beta)` at nodes `1..N-1`.
//!
//! Each segment is propagated forward, state and costate together, with the
//! torque at node `k` set to the saturation of `lambda^k`. The residual is
//! stacked segment by segment: the matching defect at the segment end (or the
//! terminal conditions for the last segment), followed by the smoothed
//! complementarity rows of the nodes the segment owns. The system is square.

use log::debug;
use nalgebra::DVector;
#[cfg(test)]
use nalgebra::DMatrix;

use crate::band::{BandCholesky, BandLu, BandMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrator::{self, IntegratorConfig, NodeState};
use crate::model::{BaseVelocity, Torque, WipModel};
use crate::pmp::{self, Bounds, Extremal, Multipliers, NodeCostate};
use crate::se2::{self, GroupElement};

/// Two-point boundary value problem on a fixed horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcProblem {
    pub initial: NodeState,
    pub final_g: GroupElement,
    pub final_alpha: f64,
    pub final_v: BaseVelocity,
    pub n_steps: usize,
    /// Step length in seconds.
    pub h: f64,
    pub bounds: Bounds,
}

impl OcProblem {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::invalid("N", format!("need at least 2 steps, got {}", self.n_steps)));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::invalid("h", "must be > 0"));
        }
        if !self.initial.is_finite() {
            return Err(Error::invalid("initial", "must be finite"));
        }
        let fin = self.final_g.is_finite()
            && self.final_alpha.is_finite()
            && self.final_v.to_vector().iter().all(|x| x.is_finite());
        if !fin {
            return Err(Error::invalid("final", "must be finite"));
        }
        self.bounds.validate()
    }

    /// Mismatch of the last node with the prescribed pose, tilt and velocity.
    /// The pose is compared modulo a full turn.
    pub fn terminal_residual(&self, last: &NodeState) -> [f64; 7] {
        let dg = se2::log_wrapped(&self.final_g.inverse().compose(&last.g)).to_vector();
        let dv = last.v.to_vector() - self.final_v.to_vector();
        [dg[0], dg[1], dg[2], last.s.alpha - self.final_alpha, dv[0], dv[1], dv[2]]
    }

    /// Initial state mismatch followed by [`Self::terminal_residual`].
    pub fn boundary_residual(&self, first: &NodeState, last: &NodeState) -> [f64; 16] {
        let mut out = [0.0; 16];
        for (o, (a, b)) in out.iter_mut().zip(first.to_array().iter().zip(self.initial.to_array())) {
            *o = a - b;
        }
        out[9..].copy_from_slice(&self.terminal_residual(last));
        out
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        IntegratorConfig::with_step(self.h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShootingConfig {
    /// Number of shooting segments; `None` picks [`default_segments`].
    pub segments: Option<usize>,
    /// Levenberg-Marquardt iterations allowed per continuation stage.
    pub max_outer_iters: usize,
    pub lm_damping_init: f64,
    /// Forward-difference step on the scaled unknowns.
    pub fd_step: f64,
    /// Smoothing levels of the complementarity functions, strictly decreasing.
    pub eps_schedule: Vec<f64>,
    /// Target infinity norm of the residual at the last stage.
    pub tol_residual: f64,
    /// Typical magnitude of costates and multipliers.
    pub costate_scale: f64,
    /// First arclength step of the boundary-value homotopy, in scaled
    /// unknowns; `None` starts Newton directly from the straight-line guess.
    pub homotopy_step: Option<f64>,
    /// The homotopy gives up once its step falls below this.
    pub homotopy_min_step: f64,
    /// Corrector iterations allowed per homotopy step.
    pub homotopy_iters: usize,
    /// Residual accepted at intermediate homotopy points.
    pub homotopy_tol: f64,
    /// Smoothing level along the homotopy. Stages of the schedule above it
    /// are skipped: the forward-unstable adjoint amplifies the spurious
    /// multipliers of heavy smoothing into a different extremal.
    pub homotopy_eps: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            segments: None,
            max_outer_iters: 200,
            lm_damping_init: 1e-3,
            fd_step: 1e-5,
            eps_schedule: (2..=10).map(|e| 10f64.powi(-e)).collect(),
            tol_residual: 1e-9,
            costate_scale: 1e-2,
            homotopy_step: Some(0.1),
            homotopy_min_step: 1e-4,
            homotopy_iters: 8,
            homotopy_tol: 1e-5,
            homotopy_eps: 1e-6,
        }
    }
}

/// Segment count used when none is configured: one segment per two steps.
/// The upright pendulum amplifies perturbations about twofold per step, so
/// longer segments leave the shooting map too stiff to converge.
pub fn default_segments(n_steps: usize) -> usize {
    (n_steps / 2).max(1)
}

impl ShootingConfig {
    pub fn validate(&self, n_steps: usize) -> Result<()> {
        let s = self.segment_count(n_steps);
        if s == 0 || s > n_steps {
            return Err(Error::invalid("segments", format!("must be in 1..={n_steps}, got {s}")));
        }
        if self.eps_schedule.is_empty() {
            return Err(Error::invalid("eps_schedule", "must not be empty"));
        }
        if self.eps_schedule.iter().any(|e| !(e.is_finite() && *e > 0.0))
            || self.eps_schedule.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::invalid("eps_schedule", "must be positive and strictly decreasing"));
        }
        for (name, v) in [
            ("tol_residual", self.tol_residual),
            ("fd_step", self.fd_step),
            ("lm_damping_init", self.lm_damping_init),
            ("costate_scale", self.costate_scale),
            ("homotopy_min_step", self.homotopy_min_step),
            ("homotopy_tol", self.homotopy_tol),
            ("homotopy_eps", self.homotopy_eps),
            ("homotopy_step", self.homotopy_step.unwrap_or(1.0)),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn segment_count(&self, n_steps: usize) -> usize {
        self.segments.unwrap_or_else(|| default_segments(n_steps))
    }
}

/// Position of every block in the unknown vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n_steps: usize,
    /// First node of every segment; `starts[0] = 0`.
    pub starts: Vec<usize>,
}

/// The unknowns in structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct Unknowns {
    /// State at the first node of every segment; entry 0 is the initial state.
    pub states: Vec<NodeState>,
    /// Costate at the first node of every segment.
    pub costates: Vec<NodeCostate>,
    /// Multipliers at every node `0..=N`; the first and last are always zero.
    pub multipliers: Vec<Multipliers>,
}

impl Layout {
    pub fn new(n_steps: usize, segments: usize) -> Result<Self> {
        if segments == 0 || segments > n_steps {
            return Err(Error::invalid("segments", format!("must be in 1..={n_steps}, got {segments}")));
        }
        let starts = (0..segments).map(|j| j * n_steps / segments).collect();
        Ok(Self { n_steps, starts })
    }

    pub fn segments(&self) -> usize {
        self.starts.len()
    }

    /// Last node reached by segment `j`.
    pub fn end(&self, j: usize) -> usize {
        self.starts.get(j + 1).copied().unwrap_or(self.n_steps)
    }

    /// Segment whose propagation starts at or passes through node `k < N`.
    pub fn segment_of(&self, k: usize) -> usize {
        self.starts.partition_point(|&s| s <= k) - 1
    }

    pub fn state_offset(&self, j: usize) -> usize {
        debug_assert!(j > 0);
        18 * j - 9
    }

    pub fn costate_offset(&self, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            18 * j
        }
    }

    fn multiplier_base(&self) -> usize {
        18 * self.segments() - 9
    }

    /// Offset of the multipliers at node `k`, `1 <= k < N`.
    pub fn multiplier_offset(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k < self.n_steps);
        self.multiplier_base() + 4 * (k - 1)
    }

    pub fn len(&self) -> usize {
        self.multiplier_base() + 4 * (self.n_steps - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, u: &Unknowns) -> Vec<f64> {
        let mut z = vec![0.0; self.len()];
        for j in 0..self.segments() {
            if j > 0 {
                let o = self.state_offset(j);
                z[o..o + 9].copy_from_slice(&u.states[j].to_array());
            }
            let o = self.costate_offset(j);
            z[o..o + 9].copy_from_slice(&u.costates[j].to_array());
        }
        for k in 1..self.n_steps {
            let o = self.multiplier_offset(k);
            z[o..o + 4].copy_from_slice(&u.multipliers[k].to_array());
        }
        z
    }

    pub fn unpack(&self, z: &[f64], initial: &NodeState) -> Unknowns {
        let mut states = Vec::with_capacity(self.segments());
        let mut costates = Vec::with_capacity(self.segments());
        for j in 0..self.segments() {
            states.push(if j == 0 {
                *initial
            } else {
                let o = self.state_offset(j);
                NodeState::from_slice(&z[o..o + 9])
            });
            let o = self.costate_offset(j);
            costates.push(NodeCostate::from_slice(&z[o..o + 9]));
        }
        let mut multipliers = vec![Multipliers::default(); self.n_steps + 1];
        for (k, m) in multipliers.iter_mut().enumerate().take(self.n_steps).skip(1) {
            let o = self.multiplier_offset(k);
            *m = Multipliers::from_slice(&z[o..o + 4]);
        }
        Unknowns { states, costates, multipliers }
    }

    /// Typical magnitude of every unknown.
    pub fn scales(&self, costate_scale: f64) -> Vec<f64> {
        let mut d = vec![costate_scale; self.len()];
        for j in 1..self.segments() {
            let o = self.state_offset(j);
            d[o..o + 9].fill(1.0);
        }
        d
    }

    /// Residual blocks that depend on unknown `i`.
    pub fn affected_segments(&self, i: usize) -> (usize, Option<usize>) {
        let base = self.multiplier_base();
        if i < base {
            // a segment's first state and costate are also the target of the
            // previous segment's matching defect
            let j = if i < 9 { 0 } else { (i + 9) / 18 };
            return if j > 0 { (j - 1, Some(j)) } else { (0, None) };
        }
        let k = (i - base) / 4 + 1;
        let j = self.segment_of(k);
        if self.starts[j] == k {
            (j - 1, Some(j))
        } else {
            (j, None)
        }
    }

    /// Unknown indices listed segment by segment, each segment's state and
    /// costate followed by the multipliers of the nodes it owns. In this
    /// order the shooting Jacobian has a narrow band.
    pub fn band_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        for j in 0..self.segments() {
            if j > 0 {
                order.extend(self.state_offset(j)..self.state_offset(j) + 9);
            }
            order.extend(self.costate_offset(j)..self.costate_offset(j) + 9);
            for k in self.starts[j].max(1)..self.end(j) {
                order.extend(self.multiplier_offset(k)..self.multiplier_offset(k) + 4);
            }
        }
        order
    }

    /// Number of residual rows in block `j`.
    pub fn block_len(&self, j: usize) -> usize {
        let head = if j + 1 < self.segments() { 18 } else { 9 };
        head + 4 * (self.end(j) - self.starts[j].max(1))
    }

    fn block_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.segments() + 1);
        let mut acc = 0;
        for j in 0..self.segments() {
            offs.push(acc);
            acc += self.block_len(j);
        }
        offs.push(acc);
        offs
    }
}

/// Propagated nodes of one segment.
#[derive(Debug, Clone)]
pub struct SegmentRun {
    /// States at nodes `start..=end`.
    pub states: Vec<NodeState>,
    /// Costates at nodes `start..=end`. The last entry is the predicted
    /// matching costate, or the terminal costate on the last segment.
    pub costates: Vec<NodeCostate>,
    /// Torques at nodes `start..end`.
    pub torques: Vec<Torque>,
}

/// Propagates segment `j` from its unknown start.
pub fn propagate_segment(
    layout: &Layout,
    u: &Unknowns,
    j: usize,
    problem: &OcProblem,
    model: &WipModel,
) -> Result<SegmentRun> {
    let cfg = problem.integrator_config();
    let (start, end) = (layout.starts[j], layout.end(j));
    let len = end - start;
    let mut states = Vec::with_capacity(len + 1);
    let mut costates = Vec::with_capacity(len + 1);
    let mut torques = Vec::with_capacity(len);
    let mut x = u.states[j];
    let mut c = u.costates[j];
    states.push(x);
    costates.push(c);
    for k in start..end {
        let tau = pmp::optimal_torque(&c.lambda, problem.bounds.torque, Extremal::Normal);
        let next = integrator::step(&x, &tau, &cfg, model).map_err(|e| Error::Segment {
            segment: j,
            source: Box::new(Error::Integrator { step: k, source: Box::new(e) }),
        })?;
        let next_c = if k + 1 == problem.n_steps {
            pmp::terminal_costate(&c, &next, problem.h, model)
        } else {
            pmp::adjoint_step(&c, &next, &u.multipliers[k + 1], problem.h, model)
                .map_err(|e| Error::Segment { segment: j, source: Box::new(e) })?
        };
        torques.push(tau);
        states.push(next);
        costates.push(next_c);
        x = next;
        c = next_c;
    }
    Ok(SegmentRun { states, costates, torques })
}

/// Residual block of segment `j`, unscaled.
pub fn segment_residual(
    layout: &Layout,
    u: &Unknowns,
    run: &SegmentRun,
    j: usize,
    problem: &OcProblem,
    eps: f64,
) -> Vec<f64> {
    let (mut out, args) = segment_parts(layout, u, run, j, problem);
    out.extend(args.iter().map(|&(p, q)| pmp::fischer_burmeister(p, q, eps)));
    out
}

/// Smooth rows of a segment and its complementarity arguments.
type SegmentParts = (Vec<f64>, Vec<(f64, f64)>);

/// Matching or terminal rows of segment `j`, and the complementarity
/// arguments of the nodes it owns.
fn segment_parts(
    layout: &Layout,
    u: &Unknowns,
    run: &SegmentRun,
    j: usize,
    problem: &OcProblem,
) -> SegmentParts {
    let mut head = Vec::with_capacity(18);
    let last = run.states.last().expect("segment has nodes");
    let last_c = run.costates.last().expect("segment has nodes");
    if j + 1 < layout.segments() {
        let target = &u.states[j + 1];
        let dg = se2::log_wrapped(&last.g.inverse().compose(&target.g)).to_vector();
        head.extend(dg.iter());
        let ta = target.to_array();
        let pa = last.to_array();
        head.extend((3..9).map(|i| ta[i] - pa[i]));
        let tc = u.costates[j + 1].to_array();
        head.extend(tc.iter().zip(last_c.to_array()).map(|(a, b)| a - b));
    } else {
        head.extend(problem.terminal_residual(last));
        head.extend(pmp::transversality_residual(last_c));
    }
    let start = layout.starts[j];
    let mut args = Vec::with_capacity(4 * (run.states.len() - 1));
    for (i, x) in run.states[..run.states.len() - 1].iter().enumerate() {
        let k = start + i;
        if k == 0 {
            continue;
        }
        args.extend(pmp::complementarity_args(x, &u.multipliers[k], &problem.bounds));
    }
    (head, args)
}

/// Rows of segment block `j` that hold costate quantities.
fn is_costate_row(layout: &Layout, j: usize, row: usize) -> bool {
    if j + 1 < layout.segments() {
        (9..18).contains(&row)
    } else {
        (7..9).contains(&row)
    }
}

/// Full stacked residual.
pub fn residual(z: &[f64], layout: &Layout, problem: &OcProblem, model: &WipModel, eps: f64) -> Result<Vec<f64>> {
    let u = layout.unpack(z, &problem.initial);
    let blocks = (0..layout.segments())
        .into_par_iter()
        .map(|j| {
            let run = propagate_segment(layout, &u, j, problem, model)?;
            Ok(segment_residual(layout, &u, &run, j, problem, eps))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.concat())
}

/// Per-node activity of the inequality constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActiveSet {
    pub tilt: bool,
    pub velocity: [bool; 3],
    pub torque: [bool; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub converged: bool,
    /// Levenberg-Marquardt iterations over all stages.
    pub iterations: usize,
    /// Infinity norm of the stacked residual at the final smoothing level.
    pub final_residual: f64,
    pub tol_residual: f64,
    pub cost: f64,
    pub h: f64,
    pub segments: usize,
    pub trajectory: Vec<NodeState>,
    pub costates: Vec<NodeCostate>,
    pub torques: Vec<Torque>,
    pub multipliers: Vec<Multipliers>,
    pub active_sets: Vec<ActiveSet>,
    /// Residual infinity norm after every accepted step.
    pub history: Vec<f64>,
    /// Residual infinity norm at the start of every smoothing stage.
    pub stage_start_residuals: Vec<f64>,
    /// Every torque sits on its bound, which is where abnormal extremals live.
    pub abnormal_suspect: bool,
}

/// `sum_k (h/2)|tau_k|^2`.
pub fn cost(torques: &[Torque], h: f64) -> f64 {
    torques.iter().map(|t| 0.5 * h * t.norm_squared()).sum()
}

fn inf_norm(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Straight-line guess: poses, tilt and velocities interpolated between the
/// boundary values, costates and multipliers zero.
pub fn initial_guess(layout: &Layout, problem: &OcProblem) -> Unknowns {
    let x0 = problem.initial;
    let n = problem.n_steps as f64;
    let dtheta = se2::wrap_angle(problem.final_g.theta - x0.g.theta);
    let v0 = x0.v.to_vector();
    let v1 = problem.final_v.to_vector();
    let states = layout
        .starts
        .iter()
        .map(|&k| {
            if k == 0 {
                return x0;
            }
            let t = k as f64 / n;
            let lerp = |a: f64, b: f64| a + t * (b - a);
            let g = GroupElement::new(
                lerp(x0.g.x, problem.final_g.x),
                lerp(x0.g.y, problem.final_g.y),
                x0.g.theta + t * dtheta,
            );
            let mut s = x0.s;
            s.alpha = lerp(x0.s.alpha, problem.final_alpha);
            let v = BaseVelocity::from_vector(&(v0 + t * (v1 - v0)));
            // wheel angles follow the interpolated rates
            let rate = 0.5 * (v0 + BaseVelocity::from_vector(&(v0 + t * (v1 - v0))).to_vector());
            s.phi1 += rate[1] * k as f64 * problem.h;
            s.phi2 += rate[2] * k as f64 * problem.h;
            NodeState::new(g, s, v)
        })
        .collect();
    Unknowns {
        states,
        costates: vec![NodeCostate::default(); layout.segments()],
        multipliers: vec![Multipliers::default(); problem.n_steps + 1],
    }
}

struct Evaluator<'a> {
    layout: &'a Layout,
    problem: &'a OcProblem,
    model: &'a WipModel,
    scales: Vec<f64>,
    row_weights: Vec<f64>,
    offsets: Vec<usize>,
    order: Vec<usize>,
    fd_step: f64,
}

impl<'a> Evaluator<'a> {
    fn new(layout: &'a Layout, problem: &'a OcProblem, model: &'a WipModel, costate_scale: f64, fd_step: f64) -> Self {
        let offsets = layout.block_offsets();
        let mut row_weights = vec![1.0; layout.len()];
        for j in 0..layout.segments() {
            for r in 0..layout.block_len(j) {
                if is_costate_row(layout, j, r) {
                    row_weights[offsets[j] + r] = 1.0 / costate_scale;
                }
            }
        }
        Self {
            layout,
            problem,
            model,
            scales: layout.scales(costate_scale),
            row_weights,
            offsets,
            order: layout.band_order(),
            fd_step,
        }
    }

    fn scale(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.scales).map(|(a, d)| a / d).collect()
    }

    fn unscale(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.scales).map(|(a, d)| a * d).collect()
    }

    /// Unweighted residual at scaled unknowns `w`.
    fn raw(&self, w: &[f64], eps: f64) -> Result<Vec<f64>> {
        residual(&self.unscale(w), self.layout, self.problem, self.model, eps)
    }

    fn weighted(&self, raw: &[f64]) -> DVector<f64> {
        DVector::from_iterator(raw.len(), raw.iter().zip(&self.row_weights).map(|(r, q)| r * q))
    }

    fn parts(&self, u: &Unknowns, j: usize) -> Result<SegmentParts> {
        let run = propagate_segment(self.layout, u, j, self.problem, self.model)?;
        Ok(segment_parts(self.layout, u, &run, j, self.problem))
    }

    /// Jacobian of the weighted residual in scaled unknowns. Smooth rows and
    /// the arguments of the complementarity functions are differenced
    /// centrally; the complementarity functions themselves, whose curvature
    /// scale is the smoothing level, are differentiated exactly.
    fn jacobian(&self, w: &[f64], eps: f64) -> Result<SparseJacobian> {
        let n = self.layout.len();
        let z = self.unscale(w);
        let u0 = self.layout.unpack(&z, &self.problem.initial);
        let grads = (0..self.layout.segments())
            .into_par_iter()
            .map(|j| {
                let (_, args) = self.parts(&u0, j)?;
                Ok(args.iter().map(|&(p, q)| pmp::fischer_burmeister_grad(p, q, eps)).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let columns = (0..n)
            .into_par_iter()
            .map(|i| {
                let shifted = |sign: f64| {
                    let mut zp = z.clone();
                    zp[i] += sign * self.fd_step * self.scales[i];
                    self.layout.unpack(&zp, &self.problem.initial)
                };
                let (up, down) = (shifted(1.0), shifted(-1.0));
                let (a, b) = self.layout.affected_segments(i);
                let mut col = Vec::new();
                let span = 2.0 * self.fd_step;
                for j in std::iter::once(a).chain(b) {
                    let (head_hi, args_hi) = self.parts(&up, j)?;
                    let (head_lo, args_lo) = self.parts(&down, j)?;
                    let o = self.offsets[j];
                    let diffs = head_hi.iter().zip(&head_lo).map(|(p, m)| (p - m) / span);
                    let fb = args_hi.iter().zip(&args_lo).zip(&grads[j]).map(|((hi, lo), (gp, gq))| {
                        (gp * (hi.0 - lo.0) + gq * (hi.1 - lo.1)) / span
                    });
                    for (r, d) in diffs.chain(fb).enumerate() {
                        let d = d * self.row_weights[o + r];
                        if d != 0.0 {
                            col.push((o + r, d));
                        }
                    }
                }
                Ok(col)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseJacobian { rows: n, columns })
    }
}

/// Square Jacobian stored as lists of `(row, value)` per column.
#[derive(Debug, Clone)]
struct SparseJacobian {
    rows: usize,
    columns: Vec<Vec<(usize, f64)>>,
}

impl SparseJacobian {
    #[cfg(test)]
    fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.columns.len());
        for (i, col) in self.columns.iter().enumerate() {
            for &(r, v) in col {
                m[(r, i)] = v;
            }
        }
        m
    }
}

/// Band LU factors of the Jacobian with columns in band order.
struct JacobianLu {
    lu: BandLu,
    order: Vec<usize>,
}

impl JacobianLu {
    fn new(jac: &SparseJacobian, order: &[usize]) -> Option<Self> {
        let entries: Vec<(usize, usize, f64)> = order
            .iter()
            .enumerate()
            .flat_map(|(p, &i)| jac.columns[i].iter().map(move |&(r, v)| (r, p, v)))
            .collect();
        let kl = entries.iter().map(|&(r, p, _)| r.saturating_sub(p)).max().unwrap_or(0);
        let ku = entries.iter().map(|&(r, p, _)| p.saturating_sub(r)).max().unwrap_or(0);
        let lu = BandLu::factor(jac.rows, kl, ku, entries)?;
        Some(Self { lu, order: order.to_vec() })
    }

    /// `x` with `J x = r`.
    fn solve(&self, r: &DVector<f64>) -> Option<DVector<f64>> {
        let mut y = r.as_slice().to_vec();
        self.lu.solve_in_place(&mut y);
        let mut x = DVector::zeros(y.len());
        for (p, &i) in self.order.iter().enumerate() {
            x[i] = y[p];
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

/// Column-equilibrated Gauss-Newton normal matrix `Jc^T Jc`, `Jc = J C^{-1}`,
/// held in band form under the permutation `order`.
struct NormalEquations {
    // equilibrated rows as (band position, value)
    rows: Vec<Vec<(usize, f64)>>,
    col_norms: Vec<f64>,
    order: Vec<usize>,
    normal: BandMatrix,
}

impl NormalEquations {
    fn new(jac: &SparseJacobian, order: &[usize]) -> Self {
        let norms: Vec<f64> =
            jac.columns.iter().map(|c| c.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()).collect();
        let max = norms.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        // inert unknowns (zero columns) keep a unit-order scale and are pinned by the damping
        let col_norms: Vec<f64> = norms.iter().map(|&n| n.max(1e-12 * max)).collect();
        let mut rows = vec![Vec::new(); jac.rows];
        for (p, &i) in order.iter().enumerate() {
            for &(r, v) in &jac.columns[i] {
                rows[r].push((p, v / col_norms[i]));
            }
        }
        let bw = rows
            .iter()
            .filter_map(|row| {
                let lo = row.iter().map(|e| e.0).min()?;
                let hi = row.iter().map(|e| e.0).max()?;
                Some(hi - lo)
            })
            .max()
            .unwrap_or(0);
        let mut normal = BandMatrix::zeros(order.len(), bw);
        for row in &rows {
            for &(p, a) in row {
                for &(q, b) in row {
                    if q <= p {
                        normal.add(p, q, a * b);
                    }
                }
            }
        }
        Self { rows, col_norms, order: order.to_vec(), normal }
    }

    /// `Jc^T r` in band positions.
    fn gradient(&self, r: &DVector<f64>) -> Vec<f64> {
        let mut g = vec![0.0; self.order.len()];
        for (row, &ri) in self.rows.iter().zip(r.iter()) {
            for &(p, v) in row {
                g[p] += v * ri;
            }
        }
        g
    }
}

/// Damped system `(Jc^T Jc + mu I) y = -Jc^T r`; the step in the unknowns is
/// `dx = C^{-1} y`.
struct DampedSystem<'a> {
    eqs: &'a NormalEquations,
    chol: BandCholesky,
}

impl<'a> DampedSystem<'a> {
    fn new(eqs: &'a NormalEquations, damping: f64) -> Option<Self> {
        let mut a = eqs.normal.clone();
        a.add_diagonal(damping);
        Some(Self { eqs, chol: a.cholesky()? })
    }

    /// Correction in equilibrated variables, in band positions.
    fn correction(&self, r: &DVector<f64>) -> Option<DVector<f64>> {
        let mut y = self.eqs.gradient(r);
        self.chol.solve_in_place(&mut y);
        let y = -DVector::from_vec(y);
        y.iter().all(|v| v.is_finite()).then_some(y)
    }

    fn unknowns_step(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut dx = DVector::zeros(y.len());
        for (p, &i) in self.eqs.order.iter().enumerate() {
            dx[i] = y[p] / self.eqs.col_norms[i];
        }
        dx
    }
}

const MIN_DAMPING: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e8;

struct StageOutcome {
    w: Vec<f64>,
    raw: Vec<f64>,
    iterations: usize,
    damping: f64,
}

/// Newton with a Levenberg-Marquardt fallback at a fixed smoothing level.
///
/// Each iteration first tries the undamped step from a direct LU solve of the
/// square Jacobian and falls back to damped normal equations only if that
/// step is rejected. A trial step is accepted when it lowers the weighted residual norm or when
/// it passes the natural monotonicity test: the correction recomputed at the
/// trial point with the current factorisation is shorter than the current
/// correction. The second test is invariant under row scaling and admits the
/// full Newton steps that briefly raise the residual on stiff shooting maps.
fn run_stage(
    ev: &Evaluator<'_>,
    mut w: Vec<f64>,
    eps: f64,
    tol: f64,
    max_iters: usize,
    mut damping: f64,
    history: &mut Vec<f64>,
) -> Result<StageOutcome> {
    let mut raw = ev.raw(&w, eps)?;
    let mut rw = ev.weighted(&raw);
    let mut best = (inf_norm(&raw), w.clone(), raw.clone());
    let mut iterations = 0;
    while iterations < max_iters && inf_norm(&raw) > tol {
        iterations += 1;
        let jac = match ev.jacobian(&w, eps) {
            Ok(jac) => jac,
            Err(e) => {
                debug!("jacobian unavailable at residual {:.3e}: {e}", inf_norm(&raw));
                break;
            }
        };
        let mut accepted = false;
        if let Some(step) = JacobianLu::new(&jac, &ev.order).and_then(|lu| {
            let dx = lu.solve(&rw)?;
            let trial: Vec<f64> = w.iter().zip(dx.iter()).map(|(a, b)| a - b).collect();
            let tr = ev.raw(&trial, eps).ok().filter(|tr| tr.iter().all(|x| x.is_finite()))?;
            let trw = ev.weighted(&tr);
            let decreases = trw.norm_squared() < rw.norm_squared();
            let natural = lu.solve(&trw).is_some_and(|b| b.norm() < dx.norm());
            (decreases || natural).then_some((trial, tr, trw))
        }) {
            (w, raw, rw) = step;
            damping = (damping * 0.3).max(MIN_DAMPING);
            accepted = true;
        }
        let eqs = (!accepted).then(|| NormalEquations::new(&jac, &ev.order));
        while let Some(eqs) = eqs.as_ref().filter(|_| !accepted && damping <= MAX_DAMPING) {
            let Some(sys) = DampedSystem::new(eqs, damping) else {
                damping *= 5.0;
                continue;
            };
            let Some(y) = sys.correction(&rw) else {
                damping *= 5.0;
                continue;
            };
            let dw = sys.unknowns_step(&y);
            let trial: Vec<f64> = w.iter().zip(dw.iter()).map(|(a, b)| a + b).collect();
            let outcome = ev.raw(&trial, eps);
            let tr = match outcome {
                Ok(tr) if tr.iter().all(|x| x.is_finite()) => tr,
                Ok(_) => {
                    damping *= 5.0;
                    continue;
                }
                Err(e) => {
                    debug!("trial step rejected: {e}");
                    damping *= 5.0;
                    continue;
                }
            };
            let trw = ev.weighted(&tr);
            let decreases = trw.norm_squared() < rw.norm_squared();
            let natural = sys.correction(&trw).is_some_and(|yb| yb.norm() < y.norm());
            if decreases || natural {
                w = trial;
                raw = tr;
                rw = trw;
                damping = (damping * 0.3).max(MIN_DAMPING);
                accepted = true;
                break;
            }
            damping *= 5.0;
        }
        let norm = inf_norm(&raw);
        history.push(norm);
        debug!("eps {eps:.1e} iter {iterations}: residual {norm:.3e} damping {damping:.1e}");
        if norm < best.0 {
            best = (norm, w.clone(), raw.clone());
        }
        if !accepted {
            debug!("damping exhausted at residual {norm:.3e}");
            break;
        }
    }
    let (_, w, raw) = best;
    Ok(StageOutcome { w, raw, iterations, damping: damping.min(MAX_DAMPING) })
}

/// Wheel rates below which a start counts as resting.
const REST_RATE: f64 = 1e-3;

/// Upright straight roll at the mean initial wheel rate, which the unforced
/// dynamics keep exactly; with zero costates and multipliers it solves the
/// problem whose target is its own end node.
///
/// From rest the linearisation cannot move sideways and the homotopy has no
/// tangent, so a resting start rolls instead at the rate that covers the
/// distance to the target over the horizon.
pub fn rolling_problem(problem: &OcProblem, model: &WipModel) -> Result<(OcProblem, Vec<NodeState>)> {
    let x0 = problem.initial;
    let mut rate = 0.5 * (x0.v.v_phi1 + x0.v.v_phi2);
    if rate.abs() < REST_RATE {
        let (dx, dy) = (problem.final_g.x - x0.g.x, problem.final_g.y - x0.g.y);
        let ahead = dx * x0.g.theta.cos() + dy * x0.g.theta.sin();
        let horizon = problem.n_steps as f64 * problem.h;
        rate = dx.hypot(dy).copysign(ahead) / (2.0 * model.params.r_w * horizon);
    }
    let mut start = x0;
    start.s.alpha = 0.0;
    start.v = BaseVelocity::new(0.0, rate, rate);
    let torques = vec![Torque::ZERO; problem.n_steps];
    let nodes = integrator::rollout(&start, &torques, &problem.integrator_config(), model)?;
    let last = nodes[problem.n_steps];
    let rolling = OcProblem {
        initial: start,
        final_g: last.g,
        final_alpha: last.s.alpha,
        final_v: last.v,
        ..*problem
    };
    Ok((rolling, nodes))
}

/// Boundary data moved a fraction `t` of the way from `from` to `to`; poses
/// move along the one-parameter subgroup joining them.
pub fn blend_problems(from: &OcProblem, to: &OcProblem, t: f64) -> OcProblem {
    let pose = |a: &GroupElement, b: &GroupElement| {
        let rel = se2::log_wrapped(&a.inverse().compose(b));
        a.compose(&se2::exp(&rel, t))
    };
    let lerp3 = |a: nalgebra::Vector3<f64>, b: nalgebra::Vector3<f64>| a + t * (b - a);
    let initial = NodeState {
        g: pose(&from.initial.g, &to.initial.g),
        s: crate::model::BaseState::from_vector(&lerp3(from.initial.s.to_vector(), to.initial.s.to_vector())),
        v: BaseVelocity::from_vector(&lerp3(from.initial.v.to_vector(), to.initial.v.to_vector())),
    };
    OcProblem {
        initial,
        final_g: pose(&from.final_g, &to.final_g),
        final_alpha: from.final_alpha + t * (to.final_alpha - from.final_alpha),
        final_v: BaseVelocity::from_vector(&lerp3(from.final_v.to_vector(), to.final_v.to_vector())),
        ..*to
    }
}

/// Boundary-value homotopy `H(w, t) = F_{blend(t)}(w)` between a solved
/// problem and the target one, traced by pseudo-arclength continuation so
/// that turning points in `t` are followed instead of stalling on them.
struct Homotopy<'a> {
    layout: &'a Layout,
    from: OcProblem,
    to: &'a OcProblem,
    model: &'a WipModel,
    cfg: &'a ShootingConfig,
    eps: f64,
}

/// Scaled unknowns and blend parameter of a point on the homotopy curve.
#[derive(Debug, Clone)]
struct CurvePoint {
    w: DVector<f64>,
    t: f64,
}

/// Unit tangent of the homotopy curve.
#[derive(Debug, Clone)]
struct Tangent {
    w: DVector<f64>,
    t: f64,
}

impl Tangent {
    fn dot(&self, other: &Tangent) -> f64 {
        self.w.dot(&other.w) + self.t * other.t
    }
}

impl<'a> Homotopy<'a> {
    fn problem(&self, t: f64) -> OcProblem {
        blend_problems(&self.from, self.to, t)
    }

    /// Raw and weighted residual at a curve point.
    fn residual(&self, w: &DVector<f64>, t: f64) -> Result<(Vec<f64>, DVector<f64>)> {
        let p = self.problem(t);
        let ev = Evaluator::new(self.layout, &p, self.model, self.cfg.costate_scale, self.cfg.fd_step);
        let raw = ev.raw(w.as_slice(), self.eps)?;
        let rw = ev.weighted(&raw);
        Ok((raw, rw))
    }

    /// Factored `D_w H` and the weighted `D_t H`.
    fn linearize(&self, w: &DVector<f64>, t: f64) -> Result<(Option<JacobianLu>, DVector<f64>)> {
        const DT: f64 = 1e-6;
        let p = self.problem(t);
        let ev = Evaluator::new(self.layout, &p, self.model, self.cfg.costate_scale, self.cfg.fd_step);
        let eqs = JacobianLu::new(&ev.jacobian(w.as_slice(), self.eps)?, &ev.order);
        let (_, hi) = self.residual(w, t + DT)?;
        let (_, lo) = self.residual(w, t - DT)?;
        Ok((eqs, (hi - lo) / (2.0 * DT)))
    }

    /// `x` with `D_w H x = r`, or `None` when the system cannot be factored.
    fn solve_jacobian(eqs: &Option<JacobianLu>, r: &DVector<f64>) -> Option<DVector<f64>> {
        eqs.as_ref()?.solve(r)
    }

    /// Tangent at a solved point, oriented along `previous`.
    fn tangent(&self, at: &CurvePoint, previous: &Tangent) -> Result<Option<Tangent>> {
        let (eqs, ht) = self.linearize(&at.w, at.t)?;
        let Some(b) = Self::solve_jacobian(&eqs, &ht) else {
            return Ok(None);
        };
        let norm = (b.norm_squared() + 1.0).sqrt();
        let mut tan = Tangent { w: -b / norm, t: 1.0 / norm };
        if tan.dot(previous) < 0.0 {
            tan.w = -tan.w;
            tan.t = -tan.t;
        }
        Ok(Some(tan))
    }

    /// Newton corrector on `H = 0` plus the arclength condition.
    fn correct(&self, base: &CurvePoint, tan: &Tangent, ds: f64) -> Result<Option<(CurvePoint, usize)>> {
        let mut w = &base.w + ds * &tan.w;
        let mut t = base.t + ds * tan.t;
        for it in 0..self.cfg.homotopy_iters {
            let (raw, rw) = self.residual(&w, t)?;
            let arc = tan.w.dot(&(&w - &base.w)) + tan.t * (t - base.t) - ds;
            if inf_norm(&raw) <= self.cfg.homotopy_tol && arc.abs() <= 1e-3 * ds {
                return Ok(Some((CurvePoint { w, t }, it)));
            }
            let (eqs, ht) = self.linearize(&w, t)?;
            let (Some(a), Some(b)) = (Self::solve_jacobian(&eqs, &rw), Self::solve_jacobian(&eqs, &ht)) else {
                return Ok(None);
            };
            let dt = (tan.w.dot(&a) - arc) / (tan.t - tan.w.dot(&b));
            if !dt.is_finite() {
                return Ok(None);
            }
            w -= a + b * dt;
            t += dt;
        }
        Ok(None)
    }
}

impl Homotopy<'_> {
    /// Plain Newton on `H(., t) = 0`, accepted only while the residual
    /// contracts.
    fn correct_at(&self, mut w: DVector<f64>, t: f64) -> Result<Option<DVector<f64>>> {
        let (mut raw, mut rw) = self.residual(&w, t)?;
        for _ in 0..self.cfg.homotopy_iters {
            if inf_norm(&raw) <= self.cfg.homotopy_tol {
                return Ok(Some(w));
            }
            let (eqs, _) = self.linearize(&w, t)?;
            let Some(dx) = Self::solve_jacobian(&eqs, &rw) else {
                return Ok(None);
            };
            let trial = &w - dx;
            let (tr, trw) = self.residual(&trial, t)?;
            if trw.norm() >= rw.norm() {
                return Ok(None);
            }
            (w, raw, rw) = (trial, tr, trw);
        }
        Ok((inf_norm(&raw) <= self.cfg.homotopy_tol).then_some(w))
    }
}

/// Longest arclength step, relative to the first one.
const MAX_ARC_GROWTH: f64 = 64.0;
/// Arclength steps allowed before the homotopy is abandoned.
const MAX_ARC_STEPS: usize = 400;

/// Solves the problem, by boundary-value homotopy from [`rolling_problem`]
/// unless disabled in `cfg`.
pub fn solve(problem: &OcProblem, cfg: &ShootingConfig, model: &WipModel) -> Result<SolveReport> {
    problem.validate()?;
    cfg.validate(problem.n_steps)?;
    let layout = Layout::new(problem.n_steps, cfg.segment_count(problem.n_steps))?;
    let Some(first_step) = cfg.homotopy_step else {
        let guess = initial_guess(&layout, problem);
        return solve_from(problem, cfg, model, &layout, &guess);
    };
    let (rolling, nodes) = rolling_problem(problem, model)?;
    let start = Unknowns {
        states: layout.starts.iter().map(|&k| nodes[k]).collect(),
        costates: vec![NodeCostate::default(); layout.segments()],
        multipliers: vec![Multipliers::default(); problem.n_steps + 1],
    };
    let hom_eps = cfg.homotopy_eps.max(*cfg.eps_schedule.last().expect("validated schedule"));
    let hom = Homotopy { layout: &layout, from: rolling, to: problem, model, cfg, eps: hom_eps };
    let mut history = Vec::new();
    let mut iterations = 0;

    // settle the start onto the smoothed curve
    let ev = Evaluator::new(&layout, &rolling, model, cfg.costate_scale, cfg.fd_step);
    let settled =
        run_stage(&ev, ev.scale(&layout.pack(&start)), hom.eps, cfg.homotopy_tol, cfg.max_outer_iters, cfg.lm_damping_init, &mut history)?;
    iterations += settled.iterations;
    let mut point = CurvePoint { w: DVector::from_vec(settled.w), t: 0.0 };
    let forward = Tangent { w: DVector::zeros(layout.len()), t: 1.0 };
    let mut tan = hom.tangent(&point, &forward)?;
    let mut ds = first_step;
    let mut steps = 0;
    let mut end = None;
    while let Some(dir) = tan.clone() {
        if steps == MAX_ARC_STEPS || ds < cfg.homotopy_min_step {
            debug!("homotopy abandoned at t = {:.4} after {steps} steps", point.t);
            break;
        }
        steps += 1;
        let corrected = hom.correct(&point, &dir, ds).unwrap_or_else(|e| {
            debug!("corrector failed: {e}");
            None
        });
        let Some((next, its)) = corrected else {
            ds *= 0.5;
            debug!("arclength step halved to {ds:.2e} at t = {:.4}", point.t);
            continue;
        };
        iterations += its;
        let next_tan = if next.t >= 1.0 { Ok(None) } else { hom.tangent(&next, &dir) };
        let Ok(next_tan) = next_tan else {
            ds *= 0.5;
            debug!("no tangent past t = {:.4}; step halved to {ds:.2e}", point.t);
            continue;
        };
        history.push(inf_norm(&hom.residual(&next.w, next.t)?.0));
        debug!("homotopy t = {:.4} (ds {ds:.2e}, {its} corrections)", next.t);
        if next.t >= 1.0 {
            // the curve crossed the target problem between the two points
            let f = (1.0 - point.t) / (next.t - point.t);
            let guess = &point.w + f * (&next.w - &point.w);
            end = Some(match hom.correct_at(guess.clone(), 1.0) {
                Ok(Some(w)) => w,
                _ => {
                    debug!("newton at the end of the homotopy did not settle");
                    guess
                }
            });
            break;
        }
        if its <= 3 {
            ds = (ds * 1.5).min(MAX_ARC_GROWTH * first_step);
        }
        tan = next_tan;
        point = next;
    }
    let ev = Evaluator::new(&layout, problem, model, cfg.costate_scale, cfg.fd_step);
    let w = match end {
        Some(w) => w.as_slice().to_vec(),
        None => point.w.as_slice().to_vec(),
    };
    let mut guess = layout.unpack(&ev.unscale(&w), &problem.initial);
    guess.states[0] = problem.initial;
    let fine = ShootingConfig {
        eps_schedule: cfg.eps_schedule.iter().copied().filter(|&e| e <= hom_eps).collect(),
        ..cfg.clone()
    };
    let mut report = solve_from(problem, &fine, model, &layout, &guess)?;
    report.iterations += iterations;
    history.append(&mut report.history);
    report.history = history;
    Ok(report)
}

/// Solves the problem by smoothing continuation from a given starting point.
pub fn solve_from(
    problem: &OcProblem,
    cfg: &ShootingConfig,
    model: &WipModel,
    layout: &Layout,
    guess: &Unknowns,
) -> Result<SolveReport> {
    problem.validate()?;
    cfg.validate(problem.n_steps)?;
    let ev = Evaluator::new(layout, problem, model, cfg.costate_scale, cfg.fd_step);
    let mut w = ev.scale(&layout.pack(guess));
    let mut history = Vec::new();
    let mut stage_start_residuals = Vec::new();
    let mut iterations = 0;
    let mut damping = cfg.lm_damping_init;
    let mut raw = Vec::new();
    let last = cfg.eps_schedule.len() - 1;
    for (i, &eps) in cfg.eps_schedule.iter().enumerate() {
        let tol = if i == last { cfg.tol_residual } else { cfg.tol_residual.max(1e-2 * eps) };
        stage_start_residuals.push(inf_norm(&ev.raw(&w, eps)?));
        let out = run_stage(&ev, w, eps, tol, cfg.max_outer_iters, damping, &mut history)?;
        iterations += out.iterations;
        w = out.w;
        raw = out.raw;
        damping = out.damping.max(cfg.lm_damping_init);
        debug!("stage eps {eps:.1e} done: residual {:.3e}", inf_norm(&raw));
    }
    let final_residual = inf_norm(&raw);
    let z = ev.unscale(&w);
    let u = layout.unpack(&z, &problem.initial);
    let mut report = assemble_report(layout, &u, problem, model)?;
    report.converged = final_residual <= cfg.tol_residual;
    report.final_residual = final_residual;
    report.tol_residual = cfg.tol_residual;
    report.iterations = iterations;
    report.history = history;
    report.stage_start_residuals = stage_start_residuals;
    Ok(report)
}

/// Concatenates the segment propagations into node sequences.
pub fn assemble_report(layout: &Layout, u: &Unknowns, problem: &OcProblem, model: &WipModel) -> Result<SolveReport> {
    let n = problem.n_steps;
    let mut trajectory = Vec::with_capacity(n + 1);
    let mut costates = Vec::with_capacity(n + 1);
    let mut torques = Vec::with_capacity(n);
    let mut u = u.clone();
    for j in 0..layout.segments() {
        // keep the heading continuous on the cover
        if let Some(prev) = trajectory.last() {
            let prev: &NodeState = prev;
            let turns = ((prev.g.theta - u.states[j].g.theta) / std::f64::consts::TAU).round();
            u.states[j].g.theta += turns * std::f64::consts::TAU;
        }
        let run = propagate_segment(layout, &u, j, problem, model)?;
        let keep = run.states.len() - 1;
        trajectory.extend_from_slice(&run.states[..keep]);
        costates.extend_from_slice(&run.costates[..keep]);
        torques.extend_from_slice(&run.torques);
        if j + 1 == layout.segments() {
            trajectory.push(run.states[keep]);
            costates.push(run.costates[keep]);
        }
    }
    let b = problem.bounds;
    let tight = 1e-6;
    let active_sets = (0..=n)
        .map(|k| {
            let x = &trajectory[k];
            let v = x.v.to_vector();
            let tau = torques.get(k).copied().unwrap_or(Torque::ZERO);
            ActiveSet {
                tilt: x.s.alpha.abs() >= b.tilt - tight,
                velocity: [0, 1, 2].map(|i| v[i].abs() >= b.velocity - tight),
                torque: [tau.tau1, tau.tau2].map(|t| t.abs() >= b.torque * (1.0 - 1e-9)),
            }
        })
        .collect::<Vec<_>>();
    let abnormal_suspect = !torques.is_empty() && active_sets[..n].iter().all(|a| a.torque.iter().all(|&t| t));
    let mut multipliers = u.multipliers.clone();
    multipliers[0] = Multipliers::default();
    multipliers[n] = Multipliers::default();
    Ok(SolveReport {
        converged: false,
        iterations: 0,
        final_residual: f64::NAN,
        tol_residual: f64::NAN,
        cost: cost(&torques, problem.h),
        h: problem.h,
        segments: layout.segments(),
        trajectory,
        costates,
        torques,
        multipliers,
        active_sets,
        history: Vec::new(),
        stage_start_residuals: Vec::new(),
        abnormal_suspect,
    })
}

/// A failed independent check of a report.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape { message: String },
    TorqueBound { index: usize, value: f64 },
    TiltBound { index: usize, value: f64 },
    VelocityBound { index: usize, value: f64 },
    /// Stored node differs from the re-simulated one.
    Dynamics { step: usize, deviation: f64 },
    Resimulation { step: usize, message: String },
    Boundary { residual: f64 },
    Kkt { residual: f64, limit: f64 },
}

/// Re-checks every condition of a converged report without trusting the solver.
///
/// Dynamics are re-simulated node by node from the stored states: a full
/// open-loop replay of an unstable system amplifies rounding beyond any
/// useful tolerance within a few seconds.
pub fn validate_report(report: &SolveReport, problem: &OcProblem, model: &WipModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = problem.n_steps;
    if report.trajectory.len() != n + 1
        || report.torques.len() != n
        || report.costates.len() != n + 1
        || report.multipliers.len() != n + 1
    {
        out.push(Violation::Shape {
            message: format!(
                "expected {} nodes and {n} torques, got {} and {}",
                n + 1,
                report.trajectory.len(),
                report.torques.len()
            ),
        });
        return out;
    }
    let b = problem.bounds;
    let feas = 1e-8;
    for (k, tau) in report.torques.iter().enumerate() {
        if !(tau.norm_inf() <= b.torque) {
            out.push(Violation::TorqueBound { index: k, value: tau.norm_inf() });
        }
    }
    for (k, x) in report.trajectory.iter().enumerate() {
        if !(x.s.alpha.abs() <= b.tilt + feas) {
            out.push(Violation::TiltBound { index: k, value: x.s.alpha });
        }
        let vmax = x.v.to_vector().amax();
        if !(vmax <= b.velocity + feas) {
            out.push(Violation::VelocityBound { index: k, value: vmax });
        }
    }
    let cfg = problem.integrator_config();
    for k in 0..n {
        match integrator::step(&report.trajectory[k], &report.torques[k], &cfg, model) {
            Ok(next) => {
                let r = pmp::dynamics_residual(&next, &report.trajectory[k + 1], &Torque::ZERO, 0.0, model);
                let dev = inf_norm(&r);
                if !(dev <= 1e-8) {
                    out.push(Violation::Dynamics { step: k, deviation: dev });
                }
            }
            Err(e) => out.push(Violation::Resimulation { step: k, message: e.to_string() }),
        }
    }
    let boundary = inf_norm(&problem.boundary_residual(&report.trajectory[0], &report.trajectory[n]));
    if !(boundary < 1e-6) {
        out.push(Violation::Boundary { residual: boundary });
    }
    let kkt = pmp::kkt_residual(
        &report.trajectory,
        &report.costates,
        &report.multipliers,
        &report.torques,
        problem,
        model,
    );
    let limit = 10.0 * report.tol_residual.max(f64::EPSILON);
    if !(kkt <= limit) {
        out.push(Violation::Kkt { residual: kkt, limit });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseState;
    use approx::assert_abs_diff_eq;

    fn bounds() -> Bounds {
        Bounds { torque: 8e-3, velocity: 20.0, tilt: 0.5 }
    }

    fn rest_problem(n: usize) -> OcProblem {
        OcProblem {
            initial: NodeState::default(),
            final_g: GroupElement::IDENTITY,
            final_alpha: 0.0,
            final_v: BaseVelocity::ZERO,
            n_steps: n,
            h: 0.05,
            bounds: bounds(),
        }
    }

    #[test]
    fn layout_counts() {
        let l = Layout::new(10, 1).unwrap();
        assert_eq!(l.len(), 9 + 4 * 9);
        let l = Layout::new(10, 2).unwrap();
        assert_eq!(l.len(), 9 + 4 * 9 + 18);
        assert_eq!(l.starts, vec![0, 5]);
        let total: usize = (0..l.segments()).map(|j| l.block_len(j)).sum();
        assert_eq!(total, l.len());
        let l = Layout::new(23, 4).unwrap();
        let total: usize = (0..l.segments()).map(|j| l.block_len(j)).sum();
        assert_eq!(total, l.len());
        assert!(Layout::new(3, 4).is_err());
    }

    #[test]
    fn layout_round_trip() {
        let p = rest_problem(12);
        let l = Layout::new(12, 3).unwrap();
        let z: Vec<f64> = (0..l.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let u = l.unpack(&z, &p.initial);
        assert_eq!(l.pack(&u), z);
    }

    #[test]
    fn segment_lookup() {
        let l = Layout::new(10, 3).unwrap();
        assert_eq!(l.starts, vec![0, 3, 6]);
        assert_eq!(l.segment_of(0), 0);
        assert_eq!(l.segment_of(2), 0);
        assert_eq!(l.segment_of(3), 1);
        assert_eq!(l.segment_of(9), 2);
        assert_eq!(l.affected_segments(0), (0, None));
        assert_eq!(l.affected_segments(l.state_offset(1)), (0, Some(1)));
        assert_eq!(l.affected_segments(l.costate_offset(2) + 8), (1, Some(2)));
        assert_eq!(l.affected_segments(l.multiplier_offset(3)), (0, Some(1)));
        assert_eq!(l.affected_segments(l.multiplier_offset(4)), (1, None));
    }

    #[test]
    fn planted_equilibrium_has_zero_residual() {
        let p = rest_problem(20);
        let l = Layout::new(20, 2).unwrap();
        let z = l.pack(&initial_guess(&l, &p));
        let r = residual(&z, &l, &p, &WipModel::default(), 0.0).unwrap();
        assert_eq!(inf_norm(&r), 0.0);
    }

    #[test]
    fn trivial_problem_solves_to_zero_cost() {
        let p = rest_problem(20);
        let report = solve(&p, &ShootingConfig::default(), &WipModel::default()).unwrap();
        assert!(report.converged);
        assert!(report.cost < 1e-18, "{}", report.cost);
        assert!(report.torques.iter().all(|t| t.norm_inf() < 1e-9));
        assert!(validate_report(&report, &p, &WipModel::default()).is_empty());
    }

    #[test]
    fn interior_perturbation_is_local() {
        let m = WipModel::default();
        let mut p = rest_problem(30);
        p.initial.v = BaseVelocity::new(0.0, 2.0, 2.0);
        p.final_v = p.initial.v;
        let l = Layout::new(30, 3).unwrap();
        let z = l.pack(&initial_guess(&l, &p));
        let r0 = residual(&z, &l, &p, &m, 1e-3).unwrap();
        let mut zp = z.clone();
        zp[l.state_offset(1) + 3] += 1e-3;
        let r1 = residual(&zp, &l, &p, &m, 1e-3).unwrap();
        let offs = l.block_offsets();
        let changed = |j: usize| (offs[j]..offs[j + 1]).any(|i| r0[i] != r1[i]);
        assert!(changed(0));
        assert!(changed(1));
        assert!(!changed(2));
    }

    #[test]
    fn short_forward_roll_converges() {
        let m = WipModel::default();
        let p = OcProblem {
            initial: NodeState::default(),
            final_g: GroupElement::new(0.02, 0.0, 0.0),
            final_alpha: 0.0,
            final_v: BaseVelocity::ZERO,
            n_steps: 20,
            h: 0.05,
            bounds: bounds(),
        };
        let report = solve(&p, &ShootingConfig::default(), &m).unwrap();
        assert!(report.converged, "residual {}", report.final_residual);
        assert!(report.cost > 0.0);
        let v = validate_report(&report, &p, &m);
        assert!(v.is_empty(), "{v:?}");
        assert_abs_diff_eq!(report.trajectory[20].g.x, 0.02, epsilon = 1e-8);
    }

    #[test]
    fn local_jacobian_matches_dense_differences() {
        let m = WipModel::default();
        let mut p = rest_problem(12);
        p.final_g = GroupElement::new(0.01, 0.0, 0.0);
        let l = Layout::new(12, 4).unwrap();
        let ev = Evaluator::new(&l, &p, &m, 1e-2, 1e-7);
        let z = l.pack(&initial_guess(&l, &p));
        let w: Vec<f64> = z.iter().zip(&ev.scales).map(|(a, d)| a / d).collect();
        let jac = ev.jacobian(&w, 1e-2).unwrap().to_dense();
        for i in 0..l.len() {
            let shifted = |d: f64| {
                let mut wp = w.clone();
                wp[i] += d;
                ev.weighted(&ev.raw(&wp, 1e-2).unwrap())
            };
            let col = (shifted(1e-7) - shifted(-1e-7)) / 2e-7;
            let err = (col - jac.column(i)).amax();
            assert!(err < 1e-6 * (1.0 + jac.column(i).amax()), "column {i}: {err:e}");
        }
    }

    #[test]
    fn validation_flags_overwritten_torque() {
        let p = rest_problem(20);
        let m = WipModel::default();
        let mut report = solve(&p, &ShootingConfig::default(), &m).unwrap();
        report.torques[7] = Torque::new(2.0 * 8e-3, 0.0);
        let v = validate_report(&report, &p, &m);
        assert!(v.contains(&Violation::TorqueBound { index: 7, value: 0.016 }), "{v:?}");
    }

    #[test]
    fn report_costate_count_matches_nodes() {
        let p = rest_problem(20);
        let l = Layout::new(20, 4).unwrap();
        let u = initial_guess(&l, &p);
        let r = assemble_report(&l, &u, &p, &WipModel::default()).unwrap();
        assert_eq!(r.costates.len(), 21);
        assert_eq!(r.trajectory.len(), 21);
        assert_eq!(r.trajectory[20].s, BaseState::default());
    }
}

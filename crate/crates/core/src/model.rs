//! Physical parameters and the reduced dynamics of the wheeled inverted pendulum.
//!
//! The shape space carries the tilt `alpha` and the two wheel angles
//! `phi1, phi2`; the pose lives on SE(2). Rolling without slipping makes the
//! body twist a linear function of the shape velocity, `xi = -A v`, with the
//! constant connection matrix returned by [`WipModel::connection`].
//!
//! The base dynamics are written with the mass matrix `M(alpha)` and the
//! Coriolis/gravity vector `c(alpha, v)`. The aggregated constants in
//! [`ModelCoefficients`] are the ones multiplying the entries of `M`:
//!
//! ```text
//! M(alpha) = | c_aa               c_ax r cos(alpha)  c_ax r cos(alpha) |
//!            | c_ax r cos(alpha)  H + c_p            K                 |
//!            | c_ax r cos(alpha)  K                  H + c_p           |
//!
//! H = r^2 (c_x + I_theta / (2 d^2)),   K = r^2 (c_x - I_theta / (2 d^2))
//! ```
//!
//! so that `1/2 v^T M v` is the kinetic part of the reduced Lagrangian once
//! the constraint `xi = -A v` is substituted.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{AlgebraElement, CoAlgebraElement};

/// Physical constants of the robot, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WipParams {
    /// Body mass.
    pub m_b: f64,
    /// Distance from the wheel axis to the body's centre of mass.
    pub b: f64,
    /// Gravitational acceleration.
    pub grav: f64,
    /// Mass of one wheel.
    pub m_w: f64,
    /// Wheel radius.
    pub r_w: f64,
    /// Half of the wheel separation.
    pub d_w: f64,
    #[serde(rename = "I_Bxx")]
    pub i_bxx: f64,
    #[serde(rename = "I_Byy")]
    pub i_byy: f64,
    #[serde(rename = "I_Bzz")]
    pub i_bzz: f64,
    #[serde(rename = "I_Wyy")]
    pub i_wyy: f64,
    #[serde(rename = "I_Wzz")]
    pub i_wzz: f64,
}

impl Default for WipParams {
    /// Desk-scale prototype values.
    fn default() -> Self {
        Self {
            m_b: 0.277,
            b: 48.67e-3,
            grav: 9.81,
            m_w: 0.028,
            r_w: 33.1e-3,
            d_w: 49e-3,
            i_bxx: 543.108e-6,
            i_byy: 481.457e-6,
            i_bzz: 153.951e-6,
            i_wyy: 7.411e-6,
            i_wzz: 4.957e-6,
        }
    }
}

impl WipParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m_b", self.m_b),
            ("b", self.b),
            ("grav", self.grav),
            ("m_w", self.m_w),
            ("r_w", self.r_w),
            ("d_w", self.d_w),
            ("I_Bxx", self.i_bxx),
            ("I_Byy", self.i_byy),
            ("I_Bzz", self.i_bzz),
            ("I_Wyy", self.i_wyy),
            ("I_Wzz", self.i_wzz),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {value}")));
            }
        }
        Ok(())
    }

    /// Parses a flat key-value (TOML) parameter file.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: WipParams = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("parameters serialize")
    }
}

/// Aggregated constants of the mass matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCoefficients {
    /// Tilt inertia about the wheel axis, `I_Byy + m_b b^2`.
    pub c_aa: f64,
    /// Tilt/translation coupling, `m_b b`.
    pub c_ax: f64,
    /// Translating mass, `m_b + 2 m_w`.
    pub c_x: f64,
    /// Wheel spin inertia, `I_Wyy`.
    pub c_p: f64,
}

pub fn coefficients_from_params(p: &WipParams) -> ModelCoefficients {
    ModelCoefficients {
        c_aa: p.i_byy + p.m_b * p.b * p.b,
        c_ax: p.m_b * p.b,
        c_x: p.m_b + 2.0 * p.m_w,
        c_p: p.i_wyy,
    }
}

/// Yaw inertia as a function of the tilt.
pub fn i_theta(alpha: f64, p: &WipParams) -> f64 {
    let (s, c) = alpha.sin_cos();
    2.0 * p.i_wzz + p.i_bzz * c * c + 2.0 * p.m_w * p.d_w * p.d_w + (p.i_bxx + p.m_b * p.b * p.b) * s * s
}

fn i_theta_prime(alpha: f64, p: &WipParams) -> f64 {
    (p.i_bxx + p.m_b * p.b * p.b - p.i_bzz) * (2.0 * alpha).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseState {
    pub alpha: f64,
    pub phi1: f64,
    pub phi2: f64,
}

impl BaseState {
    pub fn new(alpha: f64, phi1: f64, phi2: f64) -> Self {
        Self { alpha, phi1, phi2 }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.alpha, self.phi1, self.phi2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseVelocity {
    pub v_alpha: f64,
    pub v_phi1: f64,
    pub v_phi2: f64,
}

impl BaseVelocity {
    pub const ZERO: Self = Self {
        v_alpha: 0.0,
        v_phi1: 0.0,
        v_phi2: 0.0,
    };

    pub fn new(v_alpha: f64, v_phi1: f64, v_phi2: f64) -> Self {
        Self {
            v_alpha,
            v_phi1,
            v_phi2,
        }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.v_alpha, self.v_phi1, self.v_phi2)
    }
}

/// Wheel torques. The dynamics see them as the generalized force `(0, tau1, tau2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Torque {
    pub tau1: f64,
    pub tau2: f64,
}

impl Torque {
    pub const ZERO: Self = Self { tau1: 0.0, tau2: 0.0 };

    pub fn new(tau1: f64, tau2: f64) -> Self {
        Self { tau1, tau2 }
    }

    pub fn embed(self) -> Vector3<f64> {
        Vector3::new(0.0, self.tau1, self.tau2)
    }

    pub fn norm_inf(self) -> f64 {
        self.tau1.abs().max(self.tau2.abs())
    }

    pub fn norm_squared(self) -> f64 {
        self.tau1 * self.tau1 + self.tau2 * self.tau2
    }

    pub fn is_finite(self) -> bool {
        self.tau1.is_finite() && self.tau2.is_finite()
    }
}

/// Parameters together with the constants derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WipModel {
    pub params: WipParams,
    pub coeffs: ModelCoefficients,
}

impl Default for WipModel {
    fn default() -> Self {
        Self::new(WipParams::default())
    }
}

impl WipModel {
    pub fn new(params: WipParams) -> Self {
        Self {
            params,
            coeffs: coefficients_from_params(&params),
        }
    }

    pub fn i_theta(&self, alpha: f64) -> f64 {
        i_theta(alpha, &self.params)
    }

    pub fn mass_matrix(&self, alpha: f64) -> Matrix3<f64> {
        let p = &self.params;
        let c = &self.coeffs;
        let r2 = p.r_w * p.r_w;
        let yaw = self.i_theta(alpha) / (2.0 * p.d_w * p.d_w);
        let h = r2 * (c.c_x + yaw);
        let k = r2 * (c.c_x - yaw);
        let m = c.c_ax * p.r_w * alpha.cos();
        Matrix3::new(
            c.c_aa, m, m, //
            m, h + c.c_p, k, //
            m, k, h + c.c_p,
        )
    }

    pub fn d_mass_d_alpha(&self, alpha: f64) -> Matrix3<f64> {
        let p = &self.params;
        let r2 = p.r_w * p.r_w;
        let dyaw = i_theta_prime(alpha, p) / (2.0 * p.d_w * p.d_w);
        let dh = r2 * dyaw;
        let dm = -self.coeffs.c_ax * p.r_w * alpha.sin();
        Matrix3::new(
            0.0, dm, dm, //
            dm, dh, -dh, //
            dm, -dh, dh,
        )
    }

    /// First component of the Coriolis/gravity vector; the wheel components vanish.
    fn coriolis_alpha(&self, alpha: f64, v: &BaseVelocity) -> f64 {
        let p = &self.params;
        let c_ax = self.coeffs.c_ax;
        let turn = (p.r_w * p.r_w / (2.0 * p.d_w * p.d_w)) * (p.i_bxx - p.i_bzz + p.m_b * p.b * p.b);
        let dphi = v.v_phi1 - v.v_phi2;
        turn * (2.0 * alpha).sin() * dphi * dphi
            - c_ax * p.r_w * alpha.sin() * v.v_alpha * (v.v_phi2 + v.v_phi1)
            + c_ax * p.grav * alpha.sin()
    }

    pub fn coriolis(&self, alpha: f64, v: &BaseVelocity) -> Vector3<f64> {
        Vector3::new(self.coriolis_alpha(alpha, v), 0.0, 0.0)
    }

    pub fn d_coriolis_d_alpha(&self, alpha: f64, v: &BaseVelocity) -> Vector3<f64> {
        let p = &self.params;
        let c_ax = self.coeffs.c_ax;
        let turn = (p.r_w * p.r_w / (2.0 * p.d_w * p.d_w)) * (p.i_bxx - p.i_bzz + p.m_b * p.b * p.b);
        let dphi = v.v_phi1 - v.v_phi2;
        let d = 2.0 * turn * (2.0 * alpha).cos() * dphi * dphi
            - c_ax * p.r_w * alpha.cos() * v.v_alpha * (v.v_phi2 + v.v_phi1)
            + c_ax * p.grav * alpha.cos();
        Vector3::new(d, 0.0, 0.0)
    }

    pub fn d_coriolis_d_v(&self, alpha: f64, v: &BaseVelocity) -> Matrix3<f64> {
        let p = &self.params;
        let c_ax = self.coeffs.c_ax;
        let turn = (p.r_w * p.r_w / (2.0 * p.d_w * p.d_w)) * (p.i_bxx - p.i_bzz + p.m_b * p.b * p.b);
        let s2 = (2.0 * alpha).sin();
        let dphi = v.v_phi1 - v.v_phi2;
        let couple = c_ax * p.r_w * alpha.sin();
        let mut out = Matrix3::zeros();
        out[(0, 0)] = -couple * (v.v_phi1 + v.v_phi2);
        out[(0, 1)] = 2.0 * turn * s2 * dphi - couple * v.v_alpha;
        out[(0, 2)] = -2.0 * turn * s2 * dphi - couple * v.v_alpha;
        out
    }

    /// Local form of the nonholonomic connection, `xi + A v = 0`.
    pub fn connection(&self) -> Matrix3<f64> {
        let r = self.params.r_w;
        let rd = r / self.params.d_w;
        Matrix3::new(
            0.0, -r, -r, //
            0.0, 0.0, 0.0, //
            0.0, rd, -rd,
        )
    }

    /// Body twist `-A v` produced by rolling without slip.
    pub fn body_twist(&self, v: &BaseVelocity) -> AlgebraElement {
        AlgebraElement::from_vector(&(-self.connection() * v.to_vector()))
    }

    /// Reduced Lagrangian `l(s, v, xi)`.
    ///
    /// Its constant coefficients are those of `M` halved, with the yaw term
    /// `I_theta / 4` so that `l(s, v, -A v) = 1/2 v^T M v - c_ax g cos(alpha)`.
    pub fn reduced_lagrangian(&self, s: &BaseState, v: &BaseVelocity, xi: &AlgebraElement) -> f64 {
        self.kinetic(s, v, xi) - self.potential(s.alpha)
    }

    fn kinetic(&self, s: &BaseState, v: &BaseVelocity, xi: &AlgebraElement) -> f64 {
        let c = &self.coeffs;
        let (sa, ca) = s.alpha.sin_cos();
        0.5 * c.c_x * (xi.vx * xi.vx + xi.vy * xi.vy)
            + 0.25 * self.i_theta(s.alpha) * xi.omega * xi.omega
            + 0.5 * c.c_aa * v.v_alpha * v.v_alpha
            + 0.5 * c.c_p * (v.v_phi1 * v.v_phi1 + v.v_phi2 * v.v_phi2)
            + c.c_ax * sa * xi.vy * xi.omega
            + c.c_ax * ca * xi.vx * v.v_alpha
    }

    pub fn potential(&self, alpha: f64) -> f64 {
        self.coeffs.c_ax * self.params.grav * alpha.cos()
    }

    /// Body momentum `dl/dxi`.
    pub fn body_momentum(&self, s: &BaseState, v: &BaseVelocity, xi: &AlgebraElement) -> CoAlgebraElement {
        let c = &self.coeffs;
        let (sa, ca) = s.alpha.sin_cos();
        CoAlgebraElement::new(
            c.c_x * xi.vx + c.c_ax * ca * v.v_alpha,
            c.c_x * xi.vy + c.c_ax * sa * xi.omega,
            0.5 * self.i_theta(s.alpha) * xi.omega + c.c_ax * sa * xi.vy,
        )
    }

    /// Kinetic part of the reduced Lagrangian plus the potential.
    pub fn total_energy(&self, s: &BaseState, v: &BaseVelocity, xi: &AlgebraElement) -> f64 {
        self.kinetic(s, v, xi) + self.potential(s.alpha)
    }

    /// Energy on the constraint distribution, `1/2 v^T M v + c_ax g cos(alpha)`.
    pub fn constrained_energy(&self, alpha: f64, v: &BaseVelocity) -> f64 {
        let vv = v.to_vector();
        0.5 * vv.dot(&(self.mass_matrix(alpha) * vv)) + self.potential(alpha)
    }
}

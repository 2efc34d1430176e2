//! The planar rigid-motion group SE(2), its Lie algebra and the dual of the algebra.
//!
//! Poses are stored as `(x, y, theta)` with `theta` on the real line (the
//! universal cover of the circle) so that headings accumulated over several
//! full turns are not wrapped. Every group operation only uses `cos`/`sin` of
//! the heading, so the product law is unaffected by the choice of cover.
//!
//! Conventions:
//!
//! * composition is `a * b = (t_a + R(theta_a) t_b, theta_a + theta_b)`;
//! * algebra elements are body-frame twists `(vx, vy, omega)`;
//! * [`coadjoint`] is the transpose of the adjoint matrix, i.e. the map that
//!   carries a spatial momentum into the body frame of `g`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Below this rotation angle the sinc-type coefficients of the exponential are
/// evaluated by their truncated Taylor series.
pub const SMALL_ANGLE: f64 = 1e-4;

/// A pose on SE(2).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupElement {
    pub x: f64,
    pub y: f64,
    /// Heading on the universal cover, never wrapped.
    pub theta: f64,
}

/// A body-frame twist in se(2).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlgebraElement {
    /// Forward velocity along the body x-axis.
    pub vx: f64,
    /// Lateral velocity along the body y-axis.
    pub vy: f64,
    /// Turning rate.
    pub omega: f64,
}

/// An element of se(2)*: two linear momenta and an angular momentum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoAlgebraElement {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl GroupElement {
    pub const IDENTITY: Self = Self {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn compose(&self, other: &Self) -> Self {
        compose(self, other)
    }

    pub fn inverse(&self) -> Self {
        inverse(self)
    }

    /// The same rigid motion with the heading brought into `(-pi, pi]`.
    pub fn wrapped(&self) -> Self {
        Self::new(self.x, self.y, wrap_angle(self.theta))
    }

    /// Homogeneous 3x3 matrix representation.
    pub fn to_homogeneous(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.x, s, c, self.y, 0.0, 0.0, 1.0)
    }

    /// Adjoint matrix acting on twists `(vx, vy, omega)`.
    pub fn adjoint_matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.y, s, c, -self.x, 0.0, 0.0, 1.0)
    }

    /// Coadjoint matrix, the transpose of [`GroupElement::adjoint_matrix`].
    pub fn coadjoint_matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, s, 0.0, -s, c, 0.0, self.y, -self.x, 1.0)
    }
}

impl Mul for GroupElement {
    type Output = GroupElement;

    fn mul(self, rhs: Self) -> Self {
        compose(&self, &rhs)
    }
}

impl AlgebraElement {
    pub const ZERO: Self = Self {
        vx: 0.0,
        vy: 0.0,
        omega: 0.0,
    };

    pub fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.omega)
    }

    pub fn scale(self, t: f64) -> Self {
        Self::new(t * self.vx, t * self.vy, t * self.omega)
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.omega.is_finite()
    }

    /// Matrix of `ad_xi` acting on twists.
    pub fn ad_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            0.0, -self.omega, self.vy, //
            self.omega, 0.0, -self.vx, //
            0.0, 0.0, 0.0,
        )
    }
}

impl Add for AlgebraElement {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self::new(self.vx + rhs.vx, self.vy + rhs.vy, self.omega + rhs.omega)
    }
}

impl Sub for AlgebraElement {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        Self::new(self.vx - rhs.vx, self.vy - rhs.vy, self.omega - rhs.omega)
    }
}

impl Neg for AlgebraElement {
    type Output = Self;

    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl CoAlgebraElement {
    pub const ZERO: Self = Self {
        px: 0.0,
        py: 0.0,
        pz: 0.0,
    };

    pub fn new(px: f64, py: f64, pz: f64) -> Self {
        Self { px, py, pz }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.pz)
    }

    pub fn scale(self, t: f64) -> Self {
        Self::new(t * self.px, t * self.py, t * self.pz)
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.pz.is_finite()
    }

    /// Duality pairing with a twist.
    pub fn pair(&self, xi: &AlgebraElement) -> f64 {
        self.px * xi.vx + self.py * xi.vy + self.pz * xi.omega
    }
}

impl Add for CoAlgebraElement {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self::new(self.px + rhs.px, self.py + rhs.py, self.pz + rhs.pz)
    }
}

impl Sub for CoAlgebraElement {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        Self::new(self.px - rhs.px, self.py - rhs.py, self.pz - rhs.pz)
    }
}

/// Group product `a * b`.
pub fn compose(a: &GroupElement, b: &GroupElement) -> GroupElement {
    let (s, c) = a.theta.sin_cos();
    GroupElement {
        x: a.x + b.x * c - b.y * s,
        y: a.y + b.x * s + b.y * c,
        theta: a.theta + b.theta,
    }
}

pub fn inverse(g: &GroupElement) -> GroupElement {
    let (s, c) = g.theta.sin_cos();
    GroupElement {
        x: -(g.x * c + g.y * s),
        y: g.x * s - g.y * c,
        theta: -g.theta,
    }
}

/// `sin(phi)/phi` and `(1 - cos(phi))/phi`.
fn sinc_pair(phi: f64) -> (f64, f64) {
    if phi.abs() < SMALL_ANGLE {
        let p2 = phi * phi;
        (1.0 - p2 / 6.0 + p2 * p2 / 120.0, phi * (0.5 - p2 / 24.0))
    } else {
        let (s, c) = phi.sin_cos();
        (s / phi, (1.0 - c) / phi)
    }
}

/// `(phi - sin(phi))/phi^2` and `(1 - cos(phi))/phi^2`.
fn sinc_pair_2(phi: f64) -> (f64, f64) {
    if phi.abs() < SMALL_ANGLE {
        let p2 = phi * phi;
        (phi * (1.0 / 6.0 - p2 / 120.0), 0.5 - p2 / 24.0)
    } else {
        let (s, c) = phi.sin_cos();
        ((phi - s) / (phi * phi), (1.0 - c) / (phi * phi))
    }
}

/// Exponential of the scaled twist `t * xi`.
pub fn exp(xi: &AlgebraElement, t: f64) -> GroupElement {
    let phi = t * xi.omega;
    let (a, b) = sinc_pair(phi);
    let (ux, uy) = (t * xi.vx, t * xi.vy);
    GroupElement {
        x: a * ux - b * uy,
        y: b * ux + a * uy,
        theta: phi,
    }
}

/// Logarithm, the inverse of `exp(., 1)`, for headings with `|theta| < 2 pi`.
pub fn log(g: &GroupElement) -> Result<AlgebraElement> {
    if !(g.theta.abs() < 2.0 * PI) {
        return Err(Error::Domain(format!(
            "log needs |theta| < 2*pi, got theta = {}",
            g.theta
        )));
    }
    let phi = g.theta;
    let (a, b) = sinc_pair(phi);
    let det = a * a + b * b;
    Ok(AlgebraElement {
        vx: (a * g.x + b * g.y) / det,
        vy: (-b * g.x + a * g.y) / det,
        omega: phi,
    })
}

/// Logarithm of the rigid motion after wrapping the heading into `(-pi, pi]`.
///
/// Used for pose mismatches, where only the rigid motion matters and not the
/// number of turns recorded on the cover.
pub fn log_wrapped(g: &GroupElement) -> AlgebraElement {
    log(&g.wrapped()).expect("wrapped heading is inside the log domain")
}

/// Coadjoint action `Ad_g^T mu`.
pub fn coadjoint(g: &GroupElement, mu: &CoAlgebraElement) -> CoAlgebraElement {
    let (s, c) = g.theta.sin_cos();
    CoAlgebraElement {
        px: c * mu.px + s * mu.py,
        py: -s * mu.px + c * mu.py,
        pz: g.y * mu.px - g.x * mu.py + mu.pz,
    }
}

/// Right Jacobian of the exponential: `exp(xi + d) = exp(xi) exp(J_r(xi) d) + O(|d|^2)`.
pub fn right_jacobian(xi: &AlgebraElement) -> Matrix3<f64> {
    let phi = xi.omega;
    let (a, b) = sinc_pair(phi);
    let (c1, c2) = sinc_pair_2(phi);
    let (r1, r2) = (xi.vx, xi.vy);
    Matrix3::new(
        a,
        b,
        r1 * c1 - r2 * c2,
        -b,
        a,
        r1 * c2 + r2 * c1,
        0.0,
        0.0,
        1.0,
    )
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = theta.rem_euclid(two_pi);
    if w > PI {
        w -= two_pi;
    }
    w
}

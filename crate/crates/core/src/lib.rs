//! Discrete geometric model of the wheeled inverted pendulum and synthesis of
//! constrained energy-optimal point-to-point trajectories.

// `!(x <= bound)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod band;
pub mod artifacts;
pub mod error;
pub mod integrator;
pub mod maneuver;
pub mod model;
pub mod pmp;
pub mod se2;
pub mod shooting;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/integrator.md")]
    pub mod integrator {}
    #[doc = include_str!("../../../book/src/optimality.md")]
    pub mod optimality {}
    #[doc = include_str!("../../../book/src/shooting.md")]
    pub mod shooting {}
    #[doc = include_str!("../../../book/src/maneuvers.md")]
    pub mod maneuvers {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
}

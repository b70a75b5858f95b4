//! Rotation-aware integrated sensing and communication (ISAC) simulator.
//!
//! A base station (BS) with a rotatable active uniform planar array serves
//! `K` single-antenna users and illuminates a sensing grid in monostatic mode,
//! assisted by a rotatable passive reconfigurable intelligent surface (RIS).
//! The crate models the rotated array geometry and the multipath channels it
//! induces, evaluates sum rate and beampattern MSE, and jointly optimizes the
//! BS precoder, the RIS phases and both arrays' Euler angles with a
//! penalty-assisted alternating optimization.
//!
//! Module map:
//!
//! * [`geometry`] - Euler rotations, element positions, steering vectors,
//!   directivity gains and their angle derivatives.
//! * [`channel`] - scenario sampling and channel synthesis with Jacobians.
//! * [`metrics`] - SINR, sum rate, beampattern, MSE and the hinge objective.
//! * [`precoder`] - quadratic-transform / MM precoder block with the
//!   eigen-decomposed water-filling solve.
//! * [`ris`] - Riemannian conjugate gradient on the complex circle manifold.
//! * [`rotation`] - box-projected gradient ascent over the six angles.
//! * [`ao`] - the outer alternating loop, penalty schedule and baselines.
//! * [`harness`] - sweeps, Monte-Carlo summaries, CSV/JSON output and CLI.

// `!(x <= y)` is used on purpose so NaN fails the checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ao;
pub mod channel;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod precoder;
pub mod ris;
pub mod rotation;

pub use error::{Error, Result};
pub use linalg::{CMatrix, CVector, C64};

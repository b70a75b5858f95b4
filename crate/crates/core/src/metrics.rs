//! Communication and sensing performance functionals.
//!
//! The `*_from` functions work on precomputed composite channels; the
//! scenario-level wrappers rebuild the channels from a [`SolutionState`].

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::{Channels, Scenario};
use crate::geometry::EulerAngles;
use crate::linalg::{cmatrix_rows, cvector_pairs, frobenius_sq, CMatrix, CVector, C64};

/// One outer pass of the alternating loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub rho: f64,
    pub objective_start: f64,
    pub after_precoder: f64,
    pub after_ris: f64,
    pub after_rotation: f64,
    pub sum_rate: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionState {
    /// `M × (K+M)`: communication beams then sensing beams.
    #[serde(with = "cmatrix_rows")]
    pub precoder: CMatrix,
    #[serde(with = "cvector_pairs")]
    pub ris_phases: CVector,
    pub bs_angles: EulerAngles,
    pub ris_angles: EulerAngles,
    pub penalty_weight: f64,
    pub trace: Vec<OuterRecord>,
    pub feasible: bool,
    pub outer_iterations: usize,
    pub sum_rate: f64,
    pub mse: f64,
}

impl SolutionState {
    /// Zero precoder, all-ones phases, unrotated arrays.
    pub fn initial(scenario: &Scenario, penalty_weight: f64) -> Self {
        Self {
            precoder: CMatrix::zeros(scenario.bs_elements(), scenario.num_beams()),
            ris_phases: CVector::from_element(scenario.ris_elements(), C64::new(1.0, 0.0)),
            bs_angles: EulerAngles::ZERO,
            ris_angles: EulerAngles::ZERO,
            penalty_weight,
            trace: Vec::new(),
            feasible: false,
            outer_iterations: 0,
            sum_rate: 0.0,
            mse: 0.0,
        }
    }

    pub fn channels(&self, scenario: &Scenario, with_jacobians: bool) -> Channels {
        scenario.channels(&self.bs_angles, &self.ris_angles, with_jacobians)
    }
}

/// `|f^H w_k|² / (Σ_{i≠k} |f^H w_i|² + σ²)` over all `K+M` columns.
pub fn sinr_from(f: &CVector, w: &CMatrix, k: usize, noise: f64) -> f64 {
    let mut signal = 0.0;
    let mut interference = 0.0;
    for (i, col) in w.column_iter().enumerate() {
        let p = f.dotc(&col).norm_sqr();
        if i == k {
            signal = p;
        } else {
            interference += p;
        }
    }
    signal / (interference + noise)
}

pub fn sum_rate_from(f_users: &[CVector], w: &CMatrix, noise: &[f64]) -> f64 {
    f_users
        .iter()
        .enumerate()
        .map(|(k, f)| (1.0 + sinr_from(f, w, k, noise[k])).log2())
        .sum()
}

/// `f^H W W^H f = ‖W^H f‖²`.
pub fn beampattern_from(f: &CVector, w: &CMatrix) -> f64 {
    w.column_iter().map(|c| c.dotc(f).norm_sqr()).sum()
}

/// Direct, cross and cascaded terms of `f^H W W^H f` for `f = d + B(θ⊙x)`.
pub fn beampattern_expanded(d: &CVector, b: &CMatrix, x: &CVector, theta: &CVector, w: &CMatrix) -> f64 {
    let r = b * theta.component_mul(x);
    let wwh = w * w.adjoint();
    let direct = d.dotc(&(&wwh * d)).re;
    let cross = 2.0 * d.dotc(&(&wwh * &r)).re;
    let cascaded = r.dotc(&(&wwh * &r)).re;
    direct + cross + cascaded
}

pub fn mse_from(f_sensing: &[CVector], w: &CMatrix, desired: &[f64]) -> f64 {
    let a = f_sensing.len() as f64;
    f_sensing
        .iter()
        .zip(desired)
        .map(|(f, &pd)| (beampattern_from(f, w) - pd).powi(2))
        .sum::<f64>()
        / a
}

/// `rate − ρ·max(MSE − η, 0)`.
pub fn hinge_objective(sum_rate: f64, mse: f64, rho: f64, threshold: f64) -> f64 {
    sum_rate - rho * (mse - threshold).max(0.0)
}

pub fn noise_variances(scenario: &Scenario) -> Vec<f64> {
    scenario.users.iter().map(|u| u.noise_variance).collect()
}

pub fn sinr(scenario: &Scenario, k: usize, state: &SolutionState) -> f64 {
    let ch = state.channels(scenario, false);
    let f = ch.effective_user(k, &state.ris_phases);
    sinr_from(&f, &state.precoder, k, scenario.users[k].noise_variance)
}

pub fn sum_rate(scenario: &Scenario, state: &SolutionState) -> f64 {
    let ch = state.channels(scenario, false);
    sum_rate_from(
        &ch.effective_users(&state.ris_phases),
        &state.precoder,
        &noise_variances(scenario),
    )
}

pub fn beampattern(scenario: &Scenario, a: usize, state: &SolutionState) -> f64 {
    let ch = state.channels(scenario, false);
    beampattern_from(&ch.sensing(a, &state.ris_phases), &state.precoder)
}

pub fn beampattern_mse(scenario: &Scenario, state: &SolutionState) -> f64 {
    let ch = state.channels(scenario, false);
    mse_from(&ch.sensing_all(&state.ris_phases), &state.precoder, &scenario.grid.desired)
}

pub fn penalized_objective(scenario: &Scenario, state: &SolutionState) -> f64 {
    evaluate(scenario, state).objective
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sum_rate: f64,
    pub mse: f64,
    pub objective: f64,
}

/// Sum rate, MSE and penalized objective from one channel evaluation.
pub fn evaluate(scenario: &Scenario, state: &SolutionState) -> Metrics {
    let ch = state.channels(scenario, false);
    evaluate_with(scenario, &ch, &state.precoder, &state.ris_phases, state.penalty_weight)
}

pub fn evaluate_with(scenario: &Scenario, ch: &Channels, w: &CMatrix, theta: &CVector, rho: f64) -> Metrics {
    let sum_rate = sum_rate_from(&ch.effective_users(theta), w, &noise_variances(scenario));
    let mse = mse_from(&ch.sensing_all(theta), w, &scenario.grid.desired);
    Metrics {
        sum_rate,
        mse,
        objective: hinge_objective(sum_rate, mse, rho, scenario.mse_threshold),
    }
}

/// `Σ_k ln(1+SINR_k)`; the solvers work in nats internally.
pub fn sum_rate_nats(f_users: &[CVector], w: &CMatrix, noise: &[f64]) -> f64 {
    sum_rate_from(f_users, w, noise) * LN_2
}

pub fn power(w: &CMatrix) -> f64 {
    frobenius_sq(w)
}

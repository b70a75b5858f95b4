//! RIS phase block: Riemannian conjugate gradient ascent on the complex
//! circle manifold `{θ : |θ_n| = 1}`.
//!
//! With `W` and the rotations fixed every inner product `w_i^H f(θ)` is
//! affine in `θ`, so each squared magnitude is a quadratic form. The forms
//! are stored through their low-rank factors `‖o + Vθ‖²`; the dense
//! `(Ξ, ξ, scalar)` coefficients are available for inspection.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::{Channels, Scenario};
use crate::error::{Error, Result};
use crate::linalg::{hermitian_part, norm_sq, real, CMatrix, CVector, C64};
use crate::metrics::{hinge_objective, noise_variances, SolutionState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RisConfig {
    pub max_iterations: usize,
    /// Stop when `‖Rgrad‖ / √N` falls below this.
    pub tolerance: f64,
    pub armijo: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Stop when an accepted step raises the objective by less than this
    /// fraction of `max(|F|, 1)`.
    pub stall_tolerance: f64,
}

impl Default for RisConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-6,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 30,
            stall_tolerance: 1e-10,
        }
    }
}

/// `‖offset + factor·θ‖²`.
#[derive(Debug, Clone)]
pub struct LowRankQuadratic {
    pub factor: CMatrix,
    pub offset: CVector,
}

impl LowRankQuadratic {
    pub fn residual(&self, theta: &CVector) -> CVector {
        &self.offset + &self.factor * theta
    }

    pub fn value(&self, theta: &CVector) -> f64 {
        norm_sq(&self.residual(theta))
    }

    /// `2 V^H (o + Vθ)`, i.e. `2∂/∂θ*`.
    pub fn gradient(&self, theta: &CVector) -> CVector {
        self.factor.ad_mul(&self.residual(theta)) * real(2.0)
    }

    /// `(Ξ, ξ, scalar)` with value `θ^H Ξ θ + 2Re(ξ^H θ) + scalar`.
    pub fn dense(&self) -> (CMatrix, CVector, f64) {
        let xi_mat = hermitian_part(&self.factor.ad_mul(&self.factor));
        let xi = self.factor.ad_mul(&self.offset);
        (xi_mat, xi, norm_sq(&self.offset))
    }

    /// Dense coefficients of one row, `|o_i + v_i θ|²`.
    pub fn dense_row(&self, i: usize) -> (CMatrix, CVector, f64) {
        let row = LowRankQuadratic {
            factor: self.factor.rows(i, 1).into_owned(),
            offset: CVector::from_element(1, self.offset[i]),
        };
        row.dense()
    }
}

/// Quadratic forms of one RIS subproblem.
#[derive(Debug, Clone)]
pub struct QuadraticForms {
    /// Per user `k`: row `i` is `w_i^H f_k(θ)`.
    pub communication: Vec<LowRankQuadratic>,
    /// Per grid point `a`: rows are `W^H f_S,a(θ)`.
    pub sensing: Vec<LowRankQuadratic>,
    pub noise: Vec<f64>,
    pub desired: Vec<f64>,
}

/// Factors for fixed `W` and rotations.
pub fn build_quadratics(scenario: &Scenario, channels: &Channels, w: &CMatrix) -> QuadraticForms {
    let wh = w.adjoint();
    let whb = &wh * &channels.b;
    let form = |direct: &CVector, ris_side: &CVector| {
        let mut factor = whb.clone();
        for (j, mut col) in factor.column_iter_mut().enumerate() {
            col.iter_mut().for_each(|v| *v *= ris_side[j]);
        }
        LowRankQuadratic {
            factor,
            offset: &wh * direct,
        }
    };
    let communication = channels.h.iter().zip(&channels.g).map(|(h, g)| form(h, g)).collect();
    let sensing = channels.d.iter().zip(&channels.x).map(|(d, x)| form(d, x)).collect();
    QuadraticForms {
        communication,
        sensing,
        noise: noise_variances(scenario),
        desired: scenario.grid.desired.clone(),
    }
}

/// Objective value and the pieces its gradient needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RisValue {
    pub objective: f64,
    pub sum_rate: f64,
    pub mse: f64,
}

/// `Σ_k log2(1 + C1k/C2k) − ρ max(mean (P_a − P_d)² − η, 0)`.
pub fn ris_objective(forms: &QuadraticForms, theta: &CVector, rho: f64, threshold: f64) -> Result<RisValue> {
    let mut sum_rate = 0.0;
    for (k, q) in forms.communication.iter().enumerate() {
        let r = q.residual(theta);
        let total = norm_sq(&r);
        let c1 = r[k].norm_sqr();
        let c2 = total - c1 + forms.noise[k];
        if !(c2 > 0.0) {
            return Err(Error::Numerical(format!("interference-plus-noise of user {k} is {c2}")));
        }
        sum_rate += (1.0 + c1 / c2).log2();
    }
    let mse = sensing_mse(forms, theta);
    Ok(RisValue {
        objective: hinge_objective(sum_rate, mse, rho, threshold),
        sum_rate,
        mse,
    })
}

fn sensing_mse(forms: &QuadraticForms, theta: &CVector) -> f64 {
    forms
        .sensing
        .iter()
        .zip(&forms.desired)
        .map(|(q, &pd)| (q.value(theta) - pd).powi(2))
        .sum::<f64>()
        / forms.sensing.len() as f64
}

/// `2∂F/∂θ*`; the sensing part is dropped while `MSE ≤ η`.
pub fn euclidean_gradient(forms: &QuadraticForms, theta: &CVector, rho: f64, threshold: f64) -> CVector {
    let n = theta.len();
    let mut grad = CVector::zeros(n);
    for (k, q) in forms.communication.iter().enumerate() {
        let r = q.residual(theta);
        let total = norm_sq(&r);
        let c1 = r[k].norm_sqr();
        let c2 = total - c1 + forms.noise[k];
        let g_total = q.factor.ad_mul(&r) * real(2.0);
        let g_c1: CVector = q.factor.row(k).adjoint() * (r[k] * 2.0);
        let g_c2 = &g_total - &g_c1;
        let scale = 1.0 / (LN_2 * c2 * (c1 + c2));
        grad += (g_c1 * real(c2) - g_c2 * real(c1)) * real(scale);
    }
    if rho != 0.0 && sensing_mse(forms, theta) > threshold {
        let a = forms.sensing.len() as f64;
        for (q, &pd) in forms.sensing.iter().zip(&forms.desired) {
            let r = q.residual(theta);
            let p = norm_sq(&r);
            let coef = -rho * 2.0 * (p - pd) / a * 2.0;
            grad += q.factor.ad_mul(&r) * real(coef);
        }
    }
    grad
}

/// `v − Re(v ⊙ θ*) ⊙ θ`.
pub fn project_tangent(theta: &CVector, v: &CVector) -> CVector {
    v.zip_map(theta, |vi, ti| vi - ti * (vi * ti.conj()).re)
}

/// Elementwise normalization back onto the manifold.
pub fn retract(theta: &CVector, step: &CVector) -> CVector {
    theta.zip_map(step, |t, s| {
        let z = t + s;
        let n = z.norm();
        if n > 0.0 && n.is_finite() {
            z / n
        } else {
            t
        }
    })
}

fn re_dot(a: &CVector, b: &CVector) -> f64 {
    a.dotc(b).re
}

#[derive(Debug, Clone)]
pub struct RisReport {
    pub theta: CVector,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Conjugate-gradient iterate between steps.
#[derive(Debug, Clone)]
pub struct RcgState {
    pub theta: CVector,
    pub value: f64,
    pub rgrad: CVector,
    pub direction: CVector,
    /// Largest per-element move of the last accepted step.
    pub move_size: f64,
}

impl RcgState {
    pub fn start(forms: &QuadraticForms, theta: &CVector, rho: f64, threshold: f64) -> Result<Self> {
        let value = ris_objective(forms, theta, rho, threshold)?.objective;
        let rgrad = project_tangent(theta, &euclidean_gradient(forms, theta, rho, threshold));
        Ok(Self {
            theta: theta.clone(),
            value,
            direction: rgrad.clone(),
            rgrad,
            move_size: 1.0,
        })
    }
}

/// Armijo backtracking along `direction`; `None` when every trial fails.
fn line_search(
    forms: &QuadraticForms,
    state: &RcgState,
    direction: &CVector,
    rho: f64,
    threshold: f64,
    config: &RisConfig,
) -> Result<Option<(CVector, f64, f64)>> {
    let slope = re_dot(&state.rgrad, direction);
    let dmax = direction.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(slope > 0.0) || dmax == 0.0 {
        return Ok(None);
    }
    let mut alpha = state.move_size.min(1.0) / dmax;
    for _ in 0..=config.max_backtracks {
        let cand = retract(&state.theta, &(direction * real(alpha)));
        let v = ris_objective(forms, &cand, rho, threshold)?.objective;
        if v >= state.value + config.armijo * alpha * slope {
            return Ok(Some((cand, v, alpha * dmax)));
        }
        alpha *= config.shrink;
    }
    Ok(None)
}

/// One conjugate-gradient step: Armijo search along the current direction,
/// steepest-ascent retry on failure, then the Polak-Ribière+ update with
/// projection as vector transport. `None` means no ascent step was found.
pub fn rcg_step(
    forms: &QuadraticForms,
    state: &RcgState,
    rho: f64,
    threshold: f64,
    config: &RisConfig,
) -> Result<Option<RcgState>> {
    let mut direction = state.direction.clone();
    if !(re_dot(&state.rgrad, &direction) > 0.0) {
        direction = state.rgrad.clone();
    }
    let mut found = line_search(forms, state, &direction, rho, threshold, config)?;
    if found.is_none() && direction != state.rgrad {
        direction = state.rgrad.clone();
        found = line_search(forms, state, &direction, rho, threshold, config)?;
    }
    let Some((theta, value, moved)) = found else {
        return Ok(None);
    };
    let rgrad = project_tangent(&theta, &euclidean_gradient(forms, &theta, rho, threshold));
    let moved_grad = project_tangent(&theta, &state.rgrad);
    let moved_dir = project_tangent(&theta, &direction);
    let prev = norm_sq(&state.rgrad);
    let chi = if prev > 0.0 {
        (re_dot(&rgrad, &(&rgrad - &moved_grad)) / prev).max(0.0)
    } else {
        0.0
    };
    let direction = &rgrad + moved_dir * real(chi);
    Ok(Some(RcgState {
        theta,
        value,
        rgrad,
        direction,
        move_size: (2.0 * moved).min(1.0),
    }))
}

/// Runs the conjugate gradient from `theta0`.
pub fn solve_ris_forms(
    forms: &QuadraticForms,
    theta0: &CVector,
    rho: f64,
    threshold: f64,
    config: &RisConfig,
) -> Result<RisReport> {
    let n = theta0.len();
    let mut state = RcgState::start(forms, theta0, rho, threshold)?;
    let mut trace = vec![state.value];
    let mut iterations = 0;
    while iterations < config.max_iterations {
        if state.rgrad.norm() / (n as f64).sqrt() <= config.tolerance {
            break;
        }
        let Some(next) = rcg_step(forms, &state, rho, threshold, config)? else {
            break;
        };
        iterations += 1;
        let gain = next.value - state.value;
        state = next;
        trace.push(state.value);
        if gain <= config.stall_tolerance * state.value.abs().max(1.0) {
            break;
        }
    }
    Ok(RisReport {
        gradient_norm: state.rgrad.norm(),
        theta: state.theta,
        objective_trace: trace,
        iterations,
    })
}

/// RIS block at the state's precoder and rotations, warm-started from the
/// state's phases.
pub fn solve_ris(scenario: &Scenario, state: &SolutionState, config: &RisConfig) -> Result<RisReport> {
    let ch = state.channels(scenario, false);
    let forms = build_quadratics(scenario, &ch, &state.precoder);
    solve_ris_forms(
        &forms,
        &state.ris_phases,
        state.penalty_weight,
        scenario.mse_threshold,
        config,
    )
}

/// Unit-modulus vector from phases.
pub fn phases(angles: &[f64]) -> CVector {
    CVector::from_iterator(angles.len(), angles.iter().map(|&a| C64::from_polar(1.0, a)))
}

//! Rotation block: box-projected gradient ascent over the stacked angles
//! `r = [r^B; r^R]` with Barzilai-Borwein trial steps and Armijo
//! backtracking.
//!
//! The objective is evaluated exactly, hinge included. Its gradient chains
//! the per-link channel Jacobians through the SINR quotient rule and the
//! beampattern derivative.

use std::f64::consts::LN_2;

use nalgebra::Vector6;

use serde::{Deserialize, Serialize};

use crate::channel::Scenario;
use crate::error::Result;
use crate::geometry::{EulerAngles, RotationBox};
use crate::linalg::{CMatrix, CVector};
use crate::metrics::{evaluate_with, SolutionState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    pub armijo: f64,
    pub shrink: f64,
    pub initial_step: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub pg_tolerance: f64,
    pub rel_tolerance: f64,
    pub max_iterations: usize,
    pub max_backtracks: usize,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            armijo: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            step_min: 1e-6,
            step_max: 1e2,
            pg_tolerance: 1e-5,
            rel_tolerance: 1e-6,
            max_iterations: 100,
            max_backtracks: 30,
        }
    }
}

pub fn stack(bs: &EulerAngles, ris: &EulerAngles) -> Vector6<f64> {
    let (b, r) = (bs.to_array(), ris.to_array());
    Vector6::new(b[0], b[1], b[2], r[0], r[1], r[2])
}

pub fn unstack(r: &Vector6<f64>) -> (EulerAngles, EulerAngles) {
    (
        EulerAngles::new(r[0], r[1], r[2]),
        EulerAngles::new(r[3], r[4], r[5]),
    )
}

/// Lower and upper corners of `D_B × D_R`.
pub fn stack_box(bs: &RotationBox, ris: &RotationBox) -> (Vector6<f64>, Vector6<f64>) {
    (stack(&bs.lower, &ris.lower), stack(&bs.upper, &ris.upper))
}

/// Componentwise clipping onto `[lower, upper]`.
pub fn box_project(r: &Vector6<f64>, lower: &Vector6<f64>, upper: &Vector6<f64>) -> Vector6<f64> {
    Vector6::from_fn(|i, _| r[i].max(lower[i]).min(upper[i]))
}

/// `‖Δr‖² / (Δr^T Δg)` clipped to `[min, max]`; a non-positive or
/// non-finite curvature estimate falls back to `max`.
pub fn bb_stepsize(dr: &Vector6<f64>, dg: &Vector6<f64>, min: f64, max: f64) -> f64 {
    let denom = dr.dot(dg);
    let alpha = dr.norm_squared() / denom;
    if !(denom > 0.0) || !alpha.is_finite() {
        return max;
    }
    alpha.clamp(min, max)
}

/// Ascent projected-gradient mapping: the gradient on free coordinates, its
/// feasible part on active bounds, zero on pinned coordinates.
pub fn projected_gradient_mapping(
    r: &Vector6<f64>,
    g: &Vector6<f64>,
    lower: &Vector6<f64>,
    upper: &Vector6<f64>,
) -> Vector6<f64> {
    Vector6::from_fn(|i, _| {
        if lower[i] >= upper[i] {
            0.0
        } else if r[i] <= lower[i] {
            g[i].max(0.0)
        } else if r[i] >= upper[i] {
            g[i].min(0.0)
        } else {
            g[i]
        }
    })
}

/// Rotation subproblem with `W` and `θ` fixed.
#[derive(Debug, Clone)]
pub struct RotationProblem<'a> {
    pub scenario: &'a Scenario,
    pub precoder: &'a CMatrix,
    pub theta: &'a CVector,
    pub rho: f64,
    pub lower: Vector6<f64>,
    pub upper: Vector6<f64>,
}

impl<'a> RotationProblem<'a> {
    pub fn new(
        scenario: &'a Scenario,
        precoder: &'a CMatrix,
        theta: &'a CVector,
        rho: f64,
        bs_box: &RotationBox,
        ris_box: &RotationBox,
    ) -> Self {
        let (lower, upper) = stack_box(bs_box, ris_box);
        Self {
            scenario,
            precoder,
            theta,
            rho,
            lower,
            upper,
        }
    }

    pub fn objective(&self, r: &Vector6<f64>) -> f64 {
        let (bs, ris) = unstack(r);
        let ch = self.scenario.channels(&bs, &ris, false);
        evaluate_with(self.scenario, &ch, self.precoder, self.theta, self.rho).objective
    }

    /// Objective and its six-component gradient.
    pub fn objective_gradient(&self, r: &Vector6<f64>) -> (f64, Vector6<f64>) {
        let (bs, ris) = unstack(r);
        let s = self.scenario;
        let ch = s.channels(&bs, &ris, true);
        let w = self.precoder;
        let wh = w.adjoint();
        let mut grad = Vector6::zeros();
        let mut rate = 0.0;

        for k in 0..s.num_users() {
            let f = ch.effective_user(k, self.theta);
            let z = &wh * &f;
            let wj = &wh * ch.user_jacobian(k, self.theta);
            let total: f64 = z.iter().map(|v| v.norm_sqr()).sum();
            let c1 = z[k].norm_sqr();
            let c2 = total - c1 + s.users[k].noise_variance;
            rate += (1.0 + c1 / c2).log2();
            for j in 0..6 {
                let mut d_total = 0.0;
                for i in 0..z.len() {
                    d_total += 2.0 * (z[i].conj() * wj[(i, j)]).re;
                }
                let d_c1 = 2.0 * (z[k].conj() * wj[(k, j)]).re;
                let d_c2 = d_total - d_c1;
                grad[j] += (c2 * d_c1 - c1 * d_c2) / (LN_2 * c2 * (c1 + c2));
            }
        }

        let a_len = s.grid_len() as f64;
        let mut mse = 0.0;
        let mut dmse = Vector6::zeros();
        for a in 0..s.grid_len() {
            let f = ch.sensing(a, self.theta);
            let z = &wh * &f;
            let p: f64 = z.iter().map(|v| v.norm_sqr()).sum();
            let err = p - s.grid.desired[a];
            mse += err * err;
            if self.rho == 0.0 {
                continue;
            }
            let wj = &wh * ch.sensing_jacobian(a, self.theta);
            for j in 0..6 {
                let mut dp = 0.0;
                for i in 0..z.len() {
                    dp += 2.0 * (z[i].conj() * wj[(i, j)]).re;
                }
                dmse[j] += 2.0 * err * dp;
            }
        }
        mse /= a_len;
        let violation = mse - s.mse_threshold;
        if violation > 0.0 {
            grad -= dmse * (self.rho / a_len);
        }
        let objective = rate - self.rho * violation.max(0.0);
        (objective, grad)
    }
}

/// Objective and gradient at the state's angles.
pub fn rotation_objective_gradient(scenario: &Scenario, state: &SolutionState) -> (f64, Vector6<f64>) {
    let p = RotationProblem::new(
        scenario,
        &state.precoder,
        &state.ris_phases,
        state.penalty_weight,
        &scenario.bs_box,
        &scenario.ris_box,
    );
    p.objective_gradient(&stack(&state.bs_angles, &state.ris_angles))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// `‖H‖ ≤ ε_pg`.
    Stationary,
    SmallStep,
    LineSearchFailed,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct RotationReport {
    pub bs: EulerAngles,
    pub ris: EulerAngles,
    pub objective_trace: Vec<f64>,
    /// Every accepted iterate, starting point included.
    pub iterates: Vec<Vector6<f64>>,
    pub iterations: usize,
    pub termination: Termination,
    pub mapping_norm: f64,
}

/// Projected gradient ascent from `r0` (clipped into the box first).
pub fn solve_rotation_problem(
    problem: &RotationProblem,
    r0: &Vector6<f64>,
    config: &RotationConfig,
) -> Result<RotationReport> {
    let (lo, hi) = (&problem.lower, &problem.upper);
    let mut r = box_project(r0, lo, hi);
    let (mut f, mut g) = problem.objective_gradient(&r);
    let mut trace = vec![f];
    let mut iterates = vec![r];
    let mut previous: Option<(Vector6<f64>, Vector6<f64>)> = None;
    let mut iterations = 0;
    let mut mapping = projected_gradient_mapping(&r, &g, lo, hi);
    let termination = loop {
        if mapping.norm() <= config.pg_tolerance {
            break Termination::Stationary;
        }
        if iterations >= config.max_iterations {
            break Termination::IterationCap;
        }
        let mut alpha = match previous {
            // Curvature of −F: the ascent gradients enter with flipped sign.
            Some((r_prev, g_prev)) => bb_stepsize(&(r - r_prev), &(g_prev - g), config.step_min, config.step_max),
            None => config.initial_step,
        };
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let cand = box_project(&(r + g * alpha), lo, hi);
            let beta = cand - r;
            let fc = problem.objective(&cand);
            if fc >= f + config.armijo * g.dot(&beta) {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= config.shrink;
        }
        let Some((cand, _)) = accepted else {
            break Termination::LineSearchFailed;
        };
        let (fc, gc) = problem.objective_gradient(&cand);
        iterations += 1;
        let step = (cand - r).norm();
        previous = Some((r, g));
        let scale = r.norm().max(1.0);
        r = cand;
        f = fc;
        g = gc;
        trace.push(f);
        iterates.push(r);
        mapping = projected_gradient_mapping(&r, &g, lo, hi);
        if step <= config.rel_tolerance * scale {
            break Termination::SmallStep;
        }
    };
    let (bs, ris) = unstack(&r);
    Ok(RotationReport {
        bs,
        ris,
        objective_trace: trace,
        iterates,
        iterations,
        termination,
        mapping_norm: mapping.norm(),
    })
}

/// Rotation block at the state's precoder and phases inside the given boxes.
pub fn solve_rotations(
    scenario: &Scenario,
    state: &SolutionState,
    bs_box: &RotationBox,
    ris_box: &RotationBox,
    config: &RotationConfig,
) -> Result<RotationReport> {
    let problem = RotationProblem::new(
        scenario,
        &state.precoder,
        &state.ris_phases,
        state.penalty_weight,
        bs_box,
        ris_box,
    );
    solve_rotation_problem(&problem, &stack(&state.bs_angles, &state.ris_angles), config)
}

//! Precoder block: quadratic-transform auxiliaries, an MM bound on the
//! sensing penalty and a water-filling solve of the resulting QCQP.
//!
//! Each iteration fixes the Lagrangian-dual/quadratic-transform auxiliaries
//! `(μ, y)` and replaces every squared beampattern error by its Lipschitz
//! upper bound at the current anchor. The sum-rate part becomes
//! `−tr(W^H Q_C W) + 2Re tr(P_C^H W)` and the bound adds `ρ Q_S`, `ρ P_S`
//! when the hinge is active. Both problems share the eigenvectors of `Q_C`,
//! so one Hermitian eigendecomposition serves the whole iteration.

use std::f64::consts::LN_2;

use nalgebra::SymmetricEigen;

use serde::{Deserialize, Serialize};

use crate::channel::{Channels, Scenario};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, hermitian_defect, re_inner, real, CMatrix, CVector, C64};
use crate::metrics::{beampattern_from, hinge_objective, mse_from, noise_variances, sum_rate_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecoderConfig {
    /// Relative objective or iterate change that stops the iteration.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Relative accuracy of `‖W‖_F² = P_B` in the bisection.
    pub bisection_tolerance: f64,
    pub max_bisection_steps: usize,
    /// Objective decrease tolerated as roundoff before reporting a bug.
    pub ascent_slack: f64,
    /// Shrink the zero-forcing start until its beampattern MSE meets the
    /// threshold.
    pub fit_initial_power: bool,
}

impl Default for PrecoderConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_iterations: 100,
            bisection_tolerance: 1e-8,
            max_bisection_steps: 200,
            ascent_slack: 1e-8,
            fit_initial_power: true,
        }
    }
}

/// Everything the W-block needs with `θ` and the rotations held fixed.
#[derive(Debug, Clone)]
pub struct PrecoderProblem {
    pub f_users: Vec<CVector>,
    pub f_sensing: Vec<CVector>,
    pub noise: Vec<f64>,
    pub desired: Vec<f64>,
    pub power_budget: f64,
    pub threshold: f64,
    pub rho: f64,
}

impl PrecoderProblem {
    pub fn new(scenario: &Scenario, channels: &Channels, theta: &CVector, rho: f64) -> Self {
        Self {
            f_users: channels.effective_users(theta),
            f_sensing: channels.sensing_all(theta),
            noise: noise_variances(scenario),
            desired: scenario.grid.desired.clone(),
            power_budget: scenario.power_budget,
            threshold: scenario.mse_threshold,
            rho,
        }
    }

    pub fn antennas(&self) -> usize {
        self.f_users[0].len()
    }

    pub fn beams(&self) -> usize {
        self.f_users.len() + self.antennas()
    }

    pub fn sum_rate(&self, w: &CMatrix) -> f64 {
        sum_rate_from(&self.f_users, w, &self.noise)
    }

    pub fn mse(&self, w: &CMatrix) -> f64 {
        mse_from(&self.f_sensing, w, &self.desired)
    }

    /// Penalized objective in bits/s/Hz.
    pub fn objective(&self, w: &CMatrix) -> f64 {
        hinge_objective(self.sum_rate(w), self.mse(w), self.rho, self.threshold)
    }
}

/// Lagrangian-dual multipliers `μ_k` and quadratic-transform variables `y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QtAuxiliaries {
    pub mu: Vec<f64>,
    pub y: Vec<C64>,
}

/// `μ_k = SINR_k`, `y_k = f_k^H w_k / (Σ_i |f_k^H w_i|² + σ_k²)`.
pub fn update_auxiliaries(f_users: &[CVector], w: &CMatrix, noise: &[f64]) -> QtAuxiliaries {
    let mut mu = Vec::with_capacity(f_users.len());
    let mut y = Vec::with_capacity(f_users.len());
    for (k, f) in f_users.iter().enumerate() {
        let z: Vec<C64> = w.column_iter().map(|c| f.dotc(&c)).collect();
        let total: f64 = z.iter().map(|v| v.norm_sqr()).sum::<f64>() + noise[k];
        let signal = z[k].norm_sqr();
        mu.push(signal / (total - signal));
        y.push(z[k] / total);
    }
    QtAuxiliaries { mu, y }
}

/// Transformed sum rate in bits for fixed auxiliaries; equals the true sum
/// rate when the auxiliaries are optimal for `w`.
pub fn transformed_rate(aux: &QtAuxiliaries, f_users: &[CVector], w: &CMatrix, noise: &[f64]) -> f64 {
    let mut total = 0.0;
    for (k, f) in f_users.iter().enumerate() {
        let (mu, y) = (aux.mu[k], aux.y[k]);
        let z: Vec<C64> = w.column_iter().map(|c| f.dotc(&c)).collect();
        let power: f64 = z.iter().map(|v| v.norm_sqr()).sum::<f64>() + noise[k];
        let quad = 2.0 * (y.conj() * z[k]).re - y.norm_sqr() * power;
        total += (1.0 + mu).ln() - mu + (1.0 + mu) * quad;
    }
    total / LN_2
}

/// `g_a(W) = (f^H W W^H f − P_d)²`.
pub fn squared_error(f: &CVector, pd: f64, w: &CMatrix) -> f64 {
    (beampattern_from(f, w) - pd).powi(2)
}

/// `4(f^H W W^H f − P_d) f f^H W`, the gradient of `g_a` in the real inner
/// product `Re tr(X^H Y)`.
pub fn mm_gradient(f: &CVector, pd: f64, w: &CMatrix) -> CMatrix {
    let fw = w.adjoint() * f;
    let scale = 4.0 * (fw.norm_squared() - pd);
    f * fw.adjoint() * real(scale)
}

/// `12 P_B s² + 4 P_d s` with `s = ‖f‖²`, floored at `1e-12`.
pub fn lipschitz_constant(f: &CVector, pd: f64, power_budget: f64) -> f64 {
    let s = f.norm_squared();
    (12.0 * power_budget * s * s + 4.0 * pd * s).max(1e-12)
}

/// Quadratic upper bounds of every `g_a` at one anchor.
#[derive(Debug, Clone)]
pub struct MmSurrogate {
    pub anchor: CMatrix,
    pub values: Vec<f64>,
    pub gradients: Vec<CMatrix>,
    pub lipschitz: Vec<f64>,
}

impl MmSurrogate {
    pub fn new(problem: &PrecoderProblem, anchor: &CMatrix) -> Self {
        let n = problem.f_sensing.len();
        let mut values = Vec::with_capacity(n);
        let mut gradients = Vec::with_capacity(n);
        let mut lipschitz = Vec::with_capacity(n);
        for (f, &pd) in problem.f_sensing.iter().zip(&problem.desired) {
            values.push(squared_error(f, pd, anchor));
            gradients.push(mm_gradient(f, pd, anchor));
            lipschitz.push(lipschitz_constant(f, pd, problem.power_budget));
        }
        Self {
            anchor: anchor.clone(),
            values,
            gradients,
            lipschitz,
        }
    }

    /// `U_a(W | W^t) = g_a(W^t) + Re tr(G_a^H (W−W^t)) + L_a/2 ‖W−W^t‖²`.
    pub fn bound(&self, a: usize, w: &CMatrix) -> f64 {
        let d = w - &self.anchor;
        self.values[a] + re_inner(&self.gradients[a], &d) + 0.5 * self.lipschitz[a] * frobenius_sq(&d)
    }

    /// Mean of the bounds; majorizes the MSE.
    pub fn mean_bound(&self, w: &CMatrix) -> f64 {
        let (b, c) = self.segment_coefficients(w);
        self.anchor_mse() + b + c
    }

    pub fn anchor_mse(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `(b, c)` with `mean_bound(W^t + sD) = anchor_mse + b s + c s²`,
    /// `D = target − W^t`.
    pub fn segment_coefficients(&self, target: &CMatrix) -> (f64, f64) {
        let d = target - &self.anchor;
        let n = self.values.len() as f64;
        let b = self.gradients.iter().map(|g| re_inner(g, &d)).sum::<f64>() / n;
        let c = 0.5 * self.lipschitz.iter().sum::<f64>() * frobenius_sq(&d) / n;
        (b, c)
    }
}

/// `max −tr(W^H Q W) + 2Re tr(P^H W) + constant` with `Q` Hermitian PSD.
#[derive(Debug, Clone)]
pub struct QcqpData {
    pub q: CMatrix,
    pub p: CMatrix,
    pub constant: f64,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMatrix,
}

impl QcqpData {
    pub fn objective(&self, w: &CMatrix) -> f64 {
        -re_inner(w, &(&self.q * w)) + 2.0 * re_inner(&self.p, w) + self.constant
    }
}

/// Communication part `(Q_C, P_C, constant)` in bits.
fn communication_terms(problem: &PrecoderProblem, aux: &QtAuxiliaries) -> (CMatrix, CMatrix, f64) {
    let m = problem.antennas();
    let mut q = CMatrix::zeros(m, m);
    let mut p = CMatrix::zeros(m, problem.beams());
    let mut constant = 0.0;
    for (k, f) in problem.f_users.iter().enumerate() {
        let (mu, y) = (aux.mu[k], aux.y[k]);
        let weight = (1.0 + mu) * y.norm_sqr() / LN_2;
        q.gerc(real(weight), f, f, real(1.0));
        let col = f * (y * (1.0 + mu) / LN_2);
        p.set_column(k, &col);
        constant += ((1.0 + mu).ln() - mu - (1.0 + mu) * y.norm_sqr() * problem.noise[k]) / LN_2;
    }
    (q, p, constant)
}

/// Builds the QCQP of one iteration. With the hinge active the sensing bound
/// adds `ρ(1/2A)ΣL_a I_M` to `Q` and `ρ(1/2A)Σ(L_a W^t − G_a)` to `P`.
pub fn assemble_qcqp(
    problem: &PrecoderProblem,
    aux: &QtAuxiliaries,
    surrogate: &MmSurrogate,
    hinge_active: bool,
) -> Result<QcqpData> {
    let (q_c, p_c, c_c) = communication_terms(problem, aux);
    let eigen = hermitian_eigen(&q_c)?;
    let mut data = QcqpData {
        q: q_c,
        p: p_c,
        constant: c_c,
        eigenvalues: eigen.0,
        eigenvectors: eigen.1,
    };
    if hinge_active {
        add_sensing_terms(&mut data, problem, surrogate, problem.rho);
    }
    Ok(data)
}

fn add_sensing_terms(data: &mut QcqpData, problem: &PrecoderProblem, s: &MmSurrogate, rho: f64) {
    let n = s.values.len() as f64;
    let l_sum: f64 = s.lipschitz.iter().sum();
    let q_s = l_sum / (2.0 * n);
    let mut p_s = &s.anchor * real(l_sum);
    for g in &s.gradients {
        p_s -= g;
    }
    p_s *= real(1.0 / (2.0 * n));
    let mut inner = 0.0;
    for (a, g) in s.gradients.iter().enumerate() {
        inner += s.values[a] - re_inner(g, &s.anchor) + 0.5 * s.lipschitz[a] * frobenius_sq(&s.anchor);
    }
    for i in 0..data.q.nrows() {
        data.q[(i, i)] += real(rho * q_s);
    }
    data.p += p_s * real(rho);
    data.constant -= rho * (inner / n - problem.threshold);
    for l in &mut data.eigenvalues {
        *l += rho * q_s;
    }
}

/// Eigenvalues and eigenvectors of a Hermitian matrix. Eigenvalues below
/// `1e-12` of the largest are roundoff of a singular matrix and set to zero.
pub fn hermitian_eigen(q: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    let scale = q.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    if hermitian_defect(q) > 1e-8 * scale.max(1.0) {
        return Err(Error::Numerical("QCQP matrix lost Hermitian symmetry".into()));
    }
    let sym = crate::linalg::hermitian_part(q);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let null_tol = 1e-12 * lmax;
    let values: Vec<f64> = eig.eigenvalues.iter().map(|&l| if l <= null_tol { 0.0 } else { l }).collect();
    Ok((values, eig.eigenvectors))
}

#[derive(Debug, Clone)]
pub struct WaterFilling {
    pub precoder: CMatrix,
    /// Multiplier of the power constraint.
    pub nu: f64,
}

/// Maximizes the QCQP over `‖W‖_F² ≤ P_B` with `W(ν) = U(Λ+νI)^{-1}U^H P`.
pub fn solve_qcqp(data: &QcqpData, power_budget: f64, config: &PrecoderConfig) -> Result<WaterFilling> {
    let u = &data.eigenvectors;
    let lambda = &data.eigenvalues;
    let pt = u.adjoint() * &data.p;
    let c: Vec<f64> = (0..pt.nrows()).map(|i| pt.row(i).norm_squared()).collect();
    let c_total: f64 = c.iter().sum();
    if c_total == 0.0 {
        return Ok(WaterFilling {
            precoder: CMatrix::zeros(data.p.nrows(), data.p.ncols()),
            nu: 0.0,
        });
    }
    let negligible = 1e-24 * c_total;
    let norm_at = |nu: f64| -> f64 {
        lambda
            .iter()
            .zip(&c)
            .map(|(&l, &ci)| {
                if nu == 0.0 && l == 0.0 {
                    if ci <= negligible { 0.0 } else { f64::INFINITY }
                } else {
                    ci / (l + nu).powi(2)
                }
            })
            .sum()
    };
    let build = |nu: f64| -> CMatrix {
        let mut scaled = pt.clone();
        for i in 0..scaled.nrows() {
            let denom = lambda[i] + nu;
            let s = if denom == 0.0 { 0.0 } else { 1.0 / denom };
            scaled.row_mut(i).scale_mut(s);
        }
        u * scaled
    };

    if norm_at(0.0) <= power_budget {
        return Ok(WaterFilling {
            precoder: build(0.0),
            nu: 0.0,
        });
    }
    let mut hi = (c_total / power_budget).sqrt().max(1e-300);
    let mut steps = 0;
    while norm_at(hi) > power_budget {
        hi *= 2.0;
        steps += 1;
        if steps > config.max_bisection_steps {
            return Err(Error::Bisection {
                steps,
                power: norm_at(hi),
                budget: power_budget,
            });
        }
    }
    let mut lo = 0.0;
    let target_lo = power_budget * (1.0 - config.bisection_tolerance);
    for _ in 0..config.max_bisection_steps {
        let p_hi = norm_at(hi);
        if p_hi >= target_lo {
            return Ok(WaterFilling {
                precoder: build(hi),
                nu: hi,
            });
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > power_budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p_hi = norm_at(hi);
    if p_hi >= target_lo && p_hi <= power_budget {
        return Ok(WaterFilling {
            precoder: build(hi),
            nu: hi,
        });
    }
    Err(Error::Bisection {
        steps: config.max_bisection_steps,
        power: p_hi,
        budget: power_budget,
    })
}

/// Regularized zero-forcing for the communication beams (90% of the budget,
/// split equally) plus scaled identity columns for sensing (10%).
pub fn initial_precoder(f_users: &[CVector], noise: &[f64], power_budget: f64) -> CMatrix {
    let k = f_users.len();
    let m = f_users[0].len();
    let f = CMatrix::from_columns(f_users);
    let delta = noise.iter().sum::<f64>() / power_budget;
    let gram = f.adjoint() * &f + CMatrix::identity(k, k) * real(delta);
    let wc = match gram.try_inverse() {
        Some(inv) => &f * inv,
        None => f.clone(),
    };
    let mut w = CMatrix::zeros(m, k + m);
    let per_user = (0.9 * power_budget / k as f64).sqrt();
    for j in 0..k {
        let col = wc.column(j);
        let n = col.norm();
        if n > 0.0 && n.is_finite() {
            w.set_column(j, &(col * real(per_user / n)));
        } else {
            w[(j % m, j)] = real(per_user);
        }
    }
    let sensing = (0.1 * power_budget / m as f64).sqrt();
    for i in 0..m {
        w[(i, k + i)] = real(sensing);
    }
    w
}

/// Largest power fraction `x ∈ (0, 1]` with `MSE(√x·W) ≤ η`.
///
/// The MSE of a scaled precoder is a quadratic in `x`, so the answer is the
/// upper end of its sublevel interval clipped to 1. `None` when no positive
/// fraction meets the threshold.
pub fn threshold_power_fraction(f_sensing: &[CVector], w: &CMatrix, desired: &[f64], threshold: f64) -> Option<f64> {
    let n = f_sensing.len() as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (f, &d) in f_sensing.iter().zip(desired) {
        let p = beampattern_from(f, w);
        a += p * p;
        b -= 2.0 * d * p;
        c += d * d;
    }
    let (a, b, c) = (a / n, b / n, c / n - threshold);
    if c + b + a <= 0.0 {
        return Some(1.0);
    }
    if a <= 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let hi = (-b + sq) / (2.0 * a);
    let lo = (-b - sq) / (2.0 * a);
    // Shave the root so roundoff cannot land just above the threshold.
    let x = hi.min(1.0) * (1.0 - 1e-12);
    (x > 0.0 && x >= lo).then_some(x)
}

/// Scales `w` by the square root of [`threshold_power_fraction`], leaving it
/// unchanged when no fraction works.
pub fn fit_to_threshold(problem: &PrecoderProblem, w: &CMatrix) -> CMatrix {
    match threshold_power_fraction(&problem.f_sensing, w, &problem.desired, problem.threshold) {
        Some(x) if x < 1.0 => w * real(x.sqrt()),
        _ => w.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct PrecoderReport {
    pub precoder: CMatrix,
    /// Penalized objective before the first and after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// `S(W) = transformed rate − ρ max(Ū(W) − η, 0)`: a concave minorant of the
/// penalized objective that is tight at the anchor.
fn minorant(problem: &PrecoderProblem, data_c: &QcqpData, s: &MmSurrogate, w: &CMatrix) -> f64 {
    hinge_objective(data_c.objective(w), s.mean_bound(w), problem.rho, problem.threshold)
}

/// Smallest `s ∈ [0,1]` with `Ū(W^t + s(target − W^t)) = η`, if any.
fn threshold_crossing(s: &MmSurrogate, target: &CMatrix, threshold: f64) -> Option<f64> {
    let (b, c) = s.segment_coefficients(target);
    let a0 = s.anchor_mse() - threshold;
    if c <= 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * c * a0;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut roots = [(-b - sq) / (2.0 * c), (-b + sq) / (2.0 * c)];
    roots.sort_by(|x, y| x.total_cmp(y));
    roots.into_iter().find(|r| (0.0..=1.0).contains(r))
}

/// One majorize-maximize step from `w`. Returns the maximizer of the
/// minorant over the power ball among the closed-form candidates.
pub fn precoder_step(problem: &PrecoderProblem, w: &CMatrix, config: &PrecoderConfig) -> Result<CMatrix> {
    let aux = update_auxiliaries(&problem.f_users, w, &problem.noise);
    let surrogate = MmSurrogate::new(problem, w);
    let data_c = assemble_qcqp(problem, &aux, &surrogate, false)?;
    let rho_zero = problem.rho == 0.0;

    let inactive = solve_qcqp(&data_c, problem.power_budget, config)?.precoder;
    if rho_zero || surrogate.mean_bound(&inactive) <= problem.threshold {
        return Ok(inactive);
    }
    let weighted = |lambda: f64| -> Result<CMatrix> {
        let mut data = data_c.clone();
        add_sensing_terms(&mut data, problem, &surrogate, lambda);
        Ok(solve_qcqp(&data, problem.power_budget, config)?.precoder)
    };
    let active = weighted(problem.rho)?;
    if surrogate.mean_bound(&active) >= problem.threshold {
        return Ok(active);
    }

    // The minorant peaks on the surface Ū = η. Its maximizer there solves the
    // weighted problem for the multiplier λ ∈ (0, ρ) that makes the bound
    // tight; Ū of the weighted solution falls as λ grows, so bisect.
    let (mut lo, mut hi) = (0.0, problem.rho);
    let mut on_surface = active.clone();
    for _ in 0..config.max_bisection_steps {
        if hi - lo <= config.bisection_tolerance * hi {
            break;
        }
        let mid = if lo > 0.0 {
            (lo * hi).sqrt()
        } else if hi > 1e-12 * problem.rho {
            hi * 1e-3
        } else {
            break;
        };
        let cand = weighted(mid)?;
        if surrogate.mean_bound(&cand) <= problem.threshold {
            hi = mid;
            on_surface = cand;
        } else {
            lo = mid;
        }
    }

    // Both segments from the anchor also cross the surface at points no
    // worse than the anchor; they guard against an inexact multiplier.
    let mut best = w.clone();
    let mut best_val = minorant(problem, &data_c, &surrogate, w);
    let v = minorant(problem, &data_c, &surrogate, &on_surface);
    if v > best_val {
        best = on_surface;
        best_val = v;
    }
    for target in [&inactive, &active] {
        if let Some(s) = threshold_crossing(&surrogate, target, problem.threshold) {
            let cand = w + (target - w) * real(s);
            let v = minorant(problem, &data_c, &surrogate, &cand);
            if v > best_val {
                best = cand;
                best_val = v;
            }
        }
    }
    Ok(best)
}

/// Iterates [`precoder_step`] from `start` until the objective stalls.
pub fn solve_precoder_from(
    problem: &PrecoderProblem,
    start: &CMatrix,
    config: &PrecoderConfig,
) -> Result<PrecoderReport> {
    let mut w = start.clone();
    let mut f = problem.objective(&w);
    let mut trace = vec![f];
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let next = precoder_step(problem, &w, config)?;
        let f_next = problem.objective(&next);
        iterations += 1;
        let slack = config.ascent_slack * f.abs().max(1.0);
        if f_next < f - slack {
            return Err(Error::AscentViolation {
                block: "precoder",
                before: f,
                after: f_next,
            });
        }
        if f_next < f {
            trace.push(f);
            break;
        }
        let change = (&next - &w).norm();
        let gain = f_next - f;
        let scale_w = w.norm().max(1e-12);
        w = next;
        f = f_next;
        trace.push(f);
        if gain <= config.tolerance * f.abs().max(1.0) || change <= config.tolerance * scale_w {
            break;
        }
    }
    Ok(PrecoderReport {
        precoder: w,
        objective_trace: trace,
        iterations,
    })
}

/// Precoder block at the state's `θ` and rotations, started from the state's
/// precoder (or the zero-forcing start when it is zero).
pub fn solve_precoder(
    scenario: &Scenario,
    state: &crate::metrics::SolutionState,
    config: &PrecoderConfig,
) -> Result<PrecoderReport> {
    let ch = state.channels(scenario, false);
    let problem = PrecoderProblem::new(scenario, &ch, &state.ris_phases, state.penalty_weight);
    let start = if frobenius_sq(&state.precoder) == 0.0 {
        let w0 = initial_precoder(&problem.f_users, &problem.noise, problem.power_budget);
        if config.fit_initial_power {
            fit_to_threshold(&problem, &w0)
        } else {
            w0
        }
    } else {
        state.precoder.clone()
    };
    solve_precoder_from(&problem, &start, config)
}

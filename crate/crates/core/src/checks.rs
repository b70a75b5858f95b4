//! Self-checks behind the `check` subcommand: analytic gradients against
//! central differences, the MM bound and the solver certificates.

use nalgebra::{Matrix3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{
    channel_jacobians, effective_channel, sample_scenario, sensing_steering, Link, Scenario, ScenarioConfig,
};
use crate::geometry::{
    boresight, direction_vector, directivity_gain, directivity_gradient, rotation_matrix, rotation_matrix_partials,
    steering_jacobian, steering_vector, ArraySpec, DirectionVector, EulerAngles, RotationBox,
};
use crate::linalg::{frobenius_sq, real, CMatrix, CVector, C64};
use crate::metrics::{mse_from, noise_variances};
use crate::precoder::{
    assemble_qcqp, initial_precoder, lipschitz_constant, mm_gradient, solve_qcqp, squared_error,
    update_auxiliaries, MmSurrogate, PrecoderConfig, PrecoderProblem,
};
use crate::ris::{build_quadratics, euclidean_gradient, ris_objective, solve_ris_forms, RisConfig};
use crate::rotation::{solve_rotation_problem, stack, RotationConfig, RotationProblem, Termination};

pub const GRADIENT_POINTS: usize = 50;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const LIPSCHITZ_PAIRS: usize = 1000;
pub const DOMINANCE_SAMPLES: usize = 500;

const STEP: f64 = 1e-6;
/// Points closer than this to a visibility boundary are skipped.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Worst relative error over one check's points.
struct Worst {
    err: f64,
    points: usize,
}

impl Worst {
    fn new() -> Self {
        Self { err: 0.0, points: 0 }
    }

    fn push(&mut self, diff: f64, a: f64, b: f64, floor: f64) {
        let e = diff / a.max(b).max(floor);
        self.err = self.err.max(e);
    }

    fn done_point(&mut self) {
        self.points += 1;
    }

    fn outcome(self, name: &'static str) -> CheckOutcome {
        CheckOutcome::new(
            name,
            self.points >= GRADIENT_POINTS && self.err <= GRADIENT_TOLERANCE,
            format!("{} points, worst relative error {:.3e}", self.points, self.err),
        )
    }
}

fn random_angles(rng: &mut ChaCha8Rng, range: f64) -> EulerAngles {
    EulerAngles::new(
        rng.random_range(-range..range),
        rng.random_range(-range..range),
        rng.random_range(-range..range),
    )
}

fn random_direction(rng: &mut ChaCha8Rng) -> DirectionVector {
    direction_vector(
        rng.random_range(-1.2..1.2),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

fn random_theta(rng: &mut ChaCha8Rng, n: usize) -> CVector {
    CVector::from_iterator(
        n,
        (0..n).map(|_| C64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

/// Uniform radius fraction of the power ball along a random direction.
fn random_in_ball(rng: &mut ChaCha8Rng, rows: usize, cols: usize, budget: f64) -> CMatrix {
    let w = random_matrix(rng, rows, cols);
    let r: f64 = rng.random_range(0.0..=1.0);
    &w * real((budget * r).sqrt() / w.norm())
}

fn offset(a: &EulerAngles, i: usize, h: f64) -> EulerAngles {
    let mut v = a.to_array();
    v[i] += h;
    EulerAngles::from_array(v)
}

fn directional_scenario(seed: u64) -> Scenario {
    let cfg = ScenarioConfig {
        bs_directivity_exponent: 2.0,
        ris_directivity_exponent: 2.0,
        ..Default::default()
    };
    sample_scenario(&cfg, seed).expect("default configuration is valid")
}

fn rotation_partials_check(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut w = Worst::new();
    for _ in 0..GRADIENT_POINTS {
        let a = random_angles(rng, std::f64::consts::PI);
        let partials = rotation_matrix_partials(&a);
        for (i, p) in partials.iter().enumerate() {
            let fd: Matrix3<f64> =
                (rotation_matrix(&offset(&a, i, STEP)) - rotation_matrix(&offset(&a, i, -STEP))) / (2.0 * STEP);
            w.push((p - fd).norm(), p.norm(), fd.norm(), 1e-8);
        }
        w.done_point();
    }
    w.outcome("rotation matrix partials")
}

fn upa(p: f64) -> ArraySpec {
    ArraySpec::upa(3, 4, 0.05, nalgebra::Vector3::new(1.0, -2.0, 0.5), 0.1, 1.5, p).expect("valid array")
}

fn steering_check(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let spec = upa(0.0);
    let mut w = Worst::new();
    for _ in 0..GRADIENT_POINTS {
        let a = random_angles(rng, std::f64::consts::PI);
        let u = random_direction(rng);
        let jac = steering_jacobian(&spec, &a, &u);
        for i in 0..3 {
            let fd = (steering_vector(&spec, &offset(&a, i, STEP), &u)
                - steering_vector(&spec, &offset(&a, i, -STEP), &u))
                / real(2.0 * STEP);
            let col = jac.column(i).into_owned();
            w.push((&col - &fd).norm(), col.norm(), fd.norm(), 1e-7);
        }
        w.done_point();
    }
    w.outcome("steering Jacobians")
}

fn directivity_check(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut w = Worst::new();
    while w.points < GRADIENT_POINTS {
        let spec = upa([1.0, 2.0, 3.5][w.points % 3]);
        let a = random_angles(rng, std::f64::consts::PI);
        let u = random_direction(rng);
        let c = boresight(&a).as_vector().dot(u.as_vector());
        if c.abs() < KINK_MARGIN {
            continue;
        }
        let g = directivity_gradient(&spec, &a, &u);
        let fd = nalgebra::Vector3::from_fn(|i, _| {
            (directivity_gain(&spec, &offset(&a, i, STEP), &u) - directivity_gain(&spec, &offset(&a, i, -STEP), &u))
                / (2.0 * STEP)
        });
        w.push((g - fd).norm(), g.norm(), fd.norm(), 1e-7);
        w.done_point();
    }
    w.outcome("directivity gradients")
}

/// Rotations whose visibility margin is at least [`KINK_MARGIN`].
fn smooth_rotations(rng: &mut ChaCha8Rng, s: &Scenario) -> (EulerAngles, EulerAngles) {
    loop {
        let rb = random_angles(rng, 1.2);
        let rr = random_angles(rng, 1.2);
        if s.visibility_margin(&rb, &rr) >= KINK_MARGIN {
            return (rb, rr);
        }
    }
}

fn six_offset(rb: &EulerAngles, rr: &EulerAngles, i: usize, h: f64) -> (EulerAngles, EulerAngles) {
    if i < 3 {
        (offset(rb, i, h), *rr)
    } else {
        (*rb, offset(rr, i - 3, h))
    }
}

fn channel_jacobian_check(rng: &mut ChaCha8Rng, seed: u64) -> CheckOutcome {
    let mut w = Worst::new();
    for p in 0..GRADIENT_POINTS {
        let s = directional_scenario(seed + p as u64);
        let (rb, rr) = smooth_rotations(rng, &s);
        let theta = random_theta(rng, s.ris_elements());
        let link = if p % 2 == 0 {
            Link::User(p / 2 % s.num_users())
        } else {
            Link::Sensing(rng.random_range(0..s.grid_len()))
        };
        let eval = |b: &EulerAngles, r: &EulerAngles| match link {
            Link::User(k) => effective_channel(&s, k, b, r, &theta),
            Link::Sensing(a) => sensing_steering(&s, a, b, r, &theta),
        };
        let jac = channel_jacobians(&s, link, &rb, &rr, &theta);
        let scale = eval(&rb, &rr).norm().max(1.0);
        for i in 0..6 {
            let (bp, rp) = six_offset(&rb, &rr, i, STEP);
            let (bm, rm) = six_offset(&rb, &rr, i, -STEP);
            let fd = (eval(&bp, &rp) - eval(&bm, &rm)) / real(2.0 * STEP);
            let col = jac.column(i).into_owned();
            w.push((&col - &fd).norm(), col.norm(), fd.norm(), 1e-7 * scale);
        }
        w.done_point();
    }
    w.outcome("channel Jacobians")
}

/// Precoder at a random fraction of the budget, hinge active or not.
fn random_precoder(rng: &mut ChaCha8Rng, s: &Scenario, f_users: &[CVector]) -> CMatrix {
    let w0 = initial_precoder(f_users, &noise_variances(s), s.power_budget);
    let mixed = &w0 + random_matrix(rng, w0.nrows(), w0.ncols()) * real(0.3 * w0.norm() / w0.len() as f64);
    let frac: f64 = rng.random_range(0.001..0.2);
    &mixed * real((frac * s.power_budget).sqrt() / mixed.norm())
}

fn ris_gradient_check(rng: &mut ChaCha8Rng, seed: u64) -> CheckOutcome {
    let mut w = Worst::new();
    let mut p = 0;
    while w.points < GRADIENT_POINTS {
        p += 1;
        let s = directional_scenario(seed + p);
        let (rb, rr) = smooth_rotations(rng, &s);
        let ch = s.channels(&rb, &rr, false);
        let theta = random_theta(rng, s.ris_elements());
        let prec = random_precoder(rng, &s, &ch.effective_users(&theta));
        let forms = build_quadratics(&s, &ch, &prec);
        let rho = [0.0, 5.0, 50.0][p as usize % 3];
        let mse = mse_from(&ch.sensing_all(&theta), &prec, &s.grid.desired);
        if (mse - s.mse_threshold).abs() < 1e-3 {
            continue;
        }
        let f = |t: &CVector| ris_objective(&forms, t, rho, s.mse_threshold).map(|v| v.objective);
        let Ok(f0) = f(&theta) else { continue };
        let g = euclidean_gradient(&forms, &theta, rho, s.mse_threshold);
        let mut fd = CVector::zeros(theta.len());
        let mut ok = true;
        for i in 0..theta.len() {
            let mut parts = [0.0; 2];
            for (j, dir) in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)].into_iter().enumerate() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += dir * STEP;
                tm[i] -= dir * STEP;
                match (f(&tp), f(&tm)) {
                    (Ok(a), Ok(b)) => parts[j] = (a - b) / (2.0 * STEP),
                    _ => ok = false,
                }
            }
            fd[i] = C64::new(parts[0], parts[1]);
        }
        if ok {
            w.push((&g - &fd).norm(), g.norm(), fd.norm(), 1e-7 * f0.abs().max(1.0));
            w.done_point();
        }
    }
    w.outcome("RIS Euclidean gradient")
}

fn rotation_gradient_check(rng: &mut ChaCha8Rng, seed: u64) -> CheckOutcome {
    let mut w = Worst::new();
    let mut p = 0;
    let open = RotationBox::symmetric(std::f64::consts::PI);
    while w.points < GRADIENT_POINTS {
        p += 1;
        let s = directional_scenario(seed + 100 + p);
        let (rb, rr) = smooth_rotations(rng, &s);
        let theta = random_theta(rng, s.ris_elements());
        let ch = s.channels(&rb, &rr, false);
        let prec = random_precoder(rng, &s, &ch.effective_users(&theta));
        let rho = [0.0, 5.0, 50.0][p as usize % 3];
        let mse = mse_from(&ch.sensing_all(&theta), &prec, &s.grid.desired);
        if (mse - s.mse_threshold).abs() < 1e-3 {
            continue;
        }
        let problem = RotationProblem::new(&s, &prec, &theta, rho, &open, &open);
        let r = stack(&rb, &rr);
        let (f0, g) = problem.objective_gradient(&r);
        let fd = Vector6::from_fn(|i, _| {
            let mut e = Vector6::zeros();
            e[i] = STEP;
            (problem.objective(&(r + e)) - problem.objective(&(r - e))) / (2.0 * STEP)
        });
        w.push((g - fd).norm(), g.norm(), fd.norm(), 1e-7 * f0.abs().max(1.0));
        w.done_point();
    }
    w.outcome("rotation gradient")
}

fn mm_gradient_check(rng: &mut ChaCha8Rng, seed: u64) -> CheckOutcome {
    let mut w = Worst::new();
    for p in 0..GRADIENT_POINTS {
        let s = directional_scenario(seed + 200 + p as u64);
        let ch = s.channels(&EulerAngles::ZERO, &EulerAngles::ZERO, false);
        let theta = random_theta(rng, s.ris_elements());
        let a = rng.random_range(0..s.grid_len());
        let f = ch.sensing(a, &theta);
        let pd = s.grid.desired[a];
        let wm = random_in_ball(rng, s.bs_elements(), s.num_beams(), s.power_budget);
        let g = mm_gradient(&f, pd, &wm);
        let mut fd = CMatrix::zeros(wm.nrows(), wm.ncols());
        for idx in 0..wm.len() {
            let mut parts = [0.0; 2];
            for (j, dir) in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)].into_iter().enumerate() {
                let mut wp = wm.clone();
                let mut wn = wm.clone();
                wp[idx] += dir * STEP;
                wn[idx] -= dir * STEP;
                parts[j] = (squared_error(&f, pd, &wp) - squared_error(&f, pd, &wn)) / (2.0 * STEP);
            }
            fd[idx] = C64::new(parts[0], parts[1]);
        }
        let g0 = squared_error(&f, pd, &wm);
        w.push((&g - &fd).norm(), g.norm(), fd.norm(), 1e-7 * g0.max(1.0));
        w.done_point();
    }
    w.outcome("MM gradient")
}

/// Central-difference checks of every analytic derivative.
pub fn gradient_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        rotation_partials_check(&mut rng),
        steering_check(&mut rng),
        directivity_check(&mut rng),
        channel_jacobian_check(&mut rng, seed),
        ris_gradient_check(&mut rng, seed),
        rotation_gradient_check(&mut rng, seed),
        mm_gradient_check(&mut rng, seed),
    ]
}

fn default_problem(seed: u64, rng: &mut ChaCha8Rng, p: f64, rho: f64) -> PrecoderProblem {
    let cfg = ScenarioConfig {
        bs_directivity_exponent: p,
        ris_directivity_exponent: p,
        ..Default::default()
    };
    let s = sample_scenario(&cfg, seed).expect("default configuration is valid");
    let (rb, rr) = (random_angles(rng, 0.5), random_angles(rng, 0.5));
    let ch = s.channels(&rb, &rr, false);
    let theta = random_theta(rng, s.ris_elements());
    PrecoderProblem::new(&s, &ch, &theta, rho)
}

/// Lipschitz inequality on random pairs and dominance of the quadratic bound.
pub fn lipschitz_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();

    let mut worst_ratio: f64 = 0.0;
    let mut configs = 0;
    for (c, p) in [0.0, 2.0, 0.0, 2.0].into_iter().enumerate() {
        let problem = default_problem(seed + c as u64, &mut rng, p, 1.0);
        let (m, beams, budget) = (problem.antennas(), problem.beams(), problem.power_budget);
        // One focused and one unfocused grid point per configuration.
        for pd in [1.0, 0.0] {
            let a = problem.desired.iter().position(|&d| d == pd).expect("grid has both kinds");
            let f = &problem.f_sensing[a];
            let l = lipschitz_constant(f, pd, budget);
            for _ in 0..LIPSCHITZ_PAIRS {
                let w1 = random_in_ball(&mut rng, m, beams, budget);
                let w2 = random_in_ball(&mut rng, m, beams, budget);
                let lhs = (mm_gradient(f, pd, &w1) - mm_gradient(f, pd, &w2)).norm();
                let rhs = l * (&w1 - &w2).norm();
                worst_ratio = worst_ratio.max(lhs / rhs);
            }
            configs += 1;
        }
    }
    out.push(CheckOutcome::new(
        "Lipschitz inequality",
        worst_ratio <= 1.0,
        format!("{configs} configurations x {LIPSCHITZ_PAIRS} pairs, max ‖ΔG‖/(L‖ΔW‖) = {worst_ratio:.4}"),
    ));

    let mut min_gap = f64::INFINITY;
    let mut anchor_err: f64 = 0.0;
    let mut samples = 0;
    for c in 0..2u64 {
        let problem = default_problem(seed + 10 + c, &mut rng, 2.0 * c as f64, 1.0);
        let (m, beams, budget) = (problem.antennas(), problem.beams(), problem.power_budget);
        let anchor = random_in_ball(&mut rng, m, beams, budget);
        let sur = MmSurrogate::new(&problem, &anchor);
        for a in 0..problem.f_sensing.len() {
            let g = squared_error(&problem.f_sensing[a], problem.desired[a], &anchor);
            anchor_err = anchor_err.max((sur.bound(a, &anchor) - g).abs() / g.max(1.0));
        }
        for _ in 0..DOMINANCE_SAMPLES {
            let w = random_in_ball(&mut rng, m, beams, budget);
            for a in 0..problem.f_sensing.len() {
                let g = squared_error(&problem.f_sensing[a], problem.desired[a], &w);
                min_gap = min_gap.min((sur.bound(a, &w) - g) / g.max(1.0));
            }
            samples += 1;
        }
    }
    out.push(CheckOutcome::new(
        "MM surrogate dominance",
        min_gap >= -1e-12 && anchor_err <= 1e-9,
        format!("{samples} samples, min relative gap {min_gap:.3e}, anchor error {anchor_err:.3e}"),
    ));
    out
}

/// Water-filling, RCG and PGD outputs meet their optimality certificates.
pub fn certificate_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xce27);
    let mut out = Vec::new();

    let cfg = PrecoderConfig::default();
    let (mut power_err, mut kkt): (f64, f64) = (0.0, 0.0);
    let mut interior = 0;
    let runs = 40;
    for c in 0..runs {
        let problem = default_problem(seed + c, &mut rng, (c % 2) as f64 * 2.0, [1.0, 1e2, 1e4][c as usize % 3]);
        let (m, beams, budget) = (problem.antennas(), problem.beams(), problem.power_budget);
        let anchor = random_in_ball(&mut rng, m, beams, budget);
        let aux = update_auxiliaries(&problem.f_users, &anchor, &problem.noise);
        let sur = MmSurrogate::new(&problem, &anchor);
        let data = match assemble_qcqp(&problem, &aux, &sur, c % 2 == 0) {
            Ok(d) => d,
            Err(e) => {
                out.push(CheckOutcome::new("water-filling certificate", false, e.to_string()));
                return out;
            }
        };
        let wf = match solve_qcqp(&data, budget, &cfg) {
            Ok(w) => w,
            Err(e) => {
                out.push(CheckOutcome::new("water-filling certificate", false, e.to_string()));
                return out;
            }
        };
        let power = frobenius_sq(&wf.precoder);
        if wf.nu > 0.0 {
            power_err = power_err.max((power - budget).abs() / budget);
        } else {
            interior += 1;
            power_err = power_err.max((power - budget).max(0.0) / budget);
        }
        let mut shifted = data.q.clone();
        for i in 0..m {
            shifted[(i, i)] += real(wf.nu);
        }
        let residual = (&shifted * &wf.precoder - &data.p).norm() / data.p.norm().max(1e-300);
        kkt = kkt.max(residual);
    }
    out.push(CheckOutcome::new(
        "water-filling certificate",
        power_err <= 1e-8 && kkt <= 1e-6,
        format!("{runs} solves ({interior} interior), power error {power_err:.3e}, KKT residual {kkt:.3e}"),
    ));

    let (mut modulus, mut tangent): (f64, f64) = (0.0, 0.0);
    for c in 0..10u64 {
        let s = directional_scenario(seed + 300 + c);
        let ch = s.channels(&EulerAngles::ZERO, &EulerAngles::ZERO, false);
        let theta0 = random_theta(&mut rng, s.ris_elements());
        let prec = random_precoder(&mut rng, &s, &ch.effective_users(&theta0));
        let forms = build_quadratics(&s, &ch, &prec);
        let rho = [0.0, 10.0][c as usize % 2];
        match solve_ris_forms(&forms, &theta0, rho, s.mse_threshold, &RisConfig::default()) {
            Ok(rep) => {
                for z in rep.theta.iter() {
                    modulus = modulus.max((z.norm() - 1.0).abs());
                }
                let eg = euclidean_gradient(&forms, &rep.theta, rho, s.mse_threshold);
                let rg = crate::ris::project_tangent(&rep.theta, &eg);
                let scale = eg.norm().max(1e-300);
                for (t, g) in rep.theta.iter().zip(rg.iter()) {
                    tangent = tangent.max((t.conj() * g).re.abs() / scale);
                }
            }
            Err(e) => {
                out.push(CheckOutcome::new("RCG certificate", false, e.to_string()));
                return out;
            }
        }
    }
    out.push(CheckOutcome::new(
        "RCG certificate",
        modulus <= 1e-12 && tangent <= 1e-12,
        format!("unit-modulus error {modulus:.3e}, normal component of Riemannian gradient {tangent:.3e}"),
    ));

    let mut infeasible = 0;
    let mut stationary = 0;
    let mut worst_mapping: f64 = 0.0;
    for c in 0..10u64 {
        let s = directional_scenario(seed + 400 + c);
        let theta = random_theta(&mut rng, s.ris_elements());
        let ch = s.channels(&EulerAngles::ZERO, &EulerAngles::ZERO, false);
        let prec = random_precoder(&mut rng, &s, &ch.effective_users(&theta));
        let bx = RotationBox::symmetric(rng.random_range(0.2..1.5));
        let problem = RotationProblem::new(&s, &prec, &theta, [0.0, 10.0][c as usize % 2], &bx, &bx);
        let r0 = stack(&random_angles(&mut rng, 0.2), &random_angles(&mut rng, 0.2));
        match solve_rotation_problem(&problem, &r0, &RotationConfig::default()) {
            Ok(rep) => {
                for r in &rep.iterates {
                    if (0..6).any(|i| r[i] < problem.lower[i] || r[i] > problem.upper[i]) {
                        infeasible += 1;
                    }
                }
                if rep.termination == Termination::Stationary {
                    stationary += 1;
                    worst_mapping = worst_mapping.max(rep.mapping_norm);
                }
            }
            Err(e) => {
                out.push(CheckOutcome::new("PGD certificate", false, e.to_string()));
                return out;
            }
        }
    }
    out.push(CheckOutcome::new(
        "PGD certificate",
        infeasible == 0 && worst_mapping <= 1e-5,
        format!(
            "{infeasible} out-of-box iterates, {stationary}/10 stationary terminations, worst ‖H‖ {worst_mapping:.3e}"
        ),
    ));
    out
}

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut all = gradient_suite(seed);
    all.extend(lipschitz_suite(seed));
    all.extend(certificate_suite(seed));
    all
}

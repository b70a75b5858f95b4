//! Derivatives and closed forms checked against oracles written here from
//! scratch: central differences, direct formula evaluation and brute force.

use std::f64::consts::PI;

use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isac_rotate::channel::{effective_channel, sample_scenario, ScenarioConfig};
use isac_rotate::geometry::{
    boresight, direction_vector, directivity_gain, rotated_positions, rotation_matrix, steering_vector, ArraySpec,
    EulerAngles,
};
use isac_rotate::linalg::{frobenius_sq, CMatrix, CVector, C64};
use isac_rotate::metrics::{beampattern_from, sinr_from, sum_rate_from};
use isac_rotate::precoder::{solve_qcqp, PrecoderConfig, QcqpData};
use isac_rotate::ris::{phases, retract};
use isac_rotate::rotation::{box_project, RotationProblem};

fn spec(p: f64) -> ArraySpec {
    ArraySpec::upa(2, 3, 0.05, Vector3::new(0.5, 0.0, 1.0), 0.1, 2.0, p).unwrap()
}

fn angles() -> impl Strategy<Value = EulerAngles> {
    (-PI..PI, -PI..PI, -PI..PI).prop_map(|(a, b, c)| EulerAngles::new(a, b, c))
}

proptest! {
    #[test]
    fn rotation_is_proper_orthogonal(a in angles()) {
        let r = rotation_matrix(&a);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        prop_assert!((boresight(&a).as_vector().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn steering_matches_phase_formula(a in angles(), el in -1.5..1.5f64, az in -PI..PI) {
        let s = spec(0.0);
        let u = direction_vector(el, az);
        let t = steering_vector(&s, &a, &u);
        let k = 2.0 * PI / s.wavelength;
        for (i, p) in rotated_positions(&s, &a).iter().enumerate() {
            let expected = C64::from_polar(1.0, k * u.as_vector().dot(p));
            prop_assert!((t[i] - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn gain_is_bounded_and_one_sided(a in angles(), el in -1.5..1.5f64, az in -PI..PI) {
        let s = spec(2.0);
        let u = direction_vector(el, az);
        let g = directivity_gain(&s, &a, &u);
        let c = boresight(&a).as_vector().dot(u.as_vector());
        prop_assert!(g >= 0.0 && g <= s.max_gain + 1e-12);
        if c >= 0.0 {
            prop_assert_eq!(g, 0.0);
        } else {
            prop_assert!((g - s.max_gain * c * c).abs() < 1e-12);
        }
    }

    #[test]
    fn box_projection_is_idempotent_clipping(v in prop::array::uniform6(-5.0..5.0f64), r in 0.0..3.0f64) {
        let v = Vector6::from_row_slice(&v);
        let (lo, hi) = (Vector6::repeat(-r), Vector6::repeat(r));
        let p = box_project(&v, &lo, &hi);
        for i in 0..6 {
            prop_assert!(p[i] >= -r && p[i] <= r);
            if v[i].abs() <= r {
                prop_assert_eq!(p[i], v[i]);
            }
        }
        prop_assert_eq!(box_project(&p, &lo, &hi), p);
    }

    #[test]
    fn retraction_lands_on_circle(ph in prop::collection::vec(-PI..PI, 8), step in prop::collection::vec(-2.0..2.0f64, 16)) {
        let theta = phases(&ph);
        let d = CVector::from_iterator(8, (0..8).map(|i| C64::new(step[2 * i], step[2 * i + 1])));
        let out = retract(&theta, &d);
        for z in out.iter() {
            prop_assert!((z.norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn isotropic_water_filling_closed_form(scale in 0.1..10.0f64, budget in 0.1..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64((scale * 1e6) as u64);
        let p = CMatrix::from_fn(3, 5, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))) * C64::new(scale, 0.0);
        let data = QcqpData {
            q: CMatrix::identity(3, 3),
            p: p.clone(),
            constant: 0.0,
            eigenvalues: vec![1.0; 3],
            eigenvectors: CMatrix::identity(3, 3),
        };
        let wf = solve_qcqp(&data, budget, &PrecoderConfig::default()).unwrap();
        let pn = frobenius_sq(&p);
        if pn <= budget {
            prop_assert_eq!(wf.nu, 0.0);
            prop_assert!((&wf.precoder - &p).norm() <= 1e-12 * p.norm());
        } else {
            let nu = pn.sqrt() / budget.sqrt() - 1.0;
            prop_assert!((wf.nu - nu).abs() <= 1e-6 * nu.max(1.0));
            prop_assert!((frobenius_sq(&wf.precoder) - budget).abs() <= 1e-8 * budget);
        }
    }
}

#[test]
fn sinr_matches_its_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = CVector::from_fn(4, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let w = CMatrix::from_fn(4, 6, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let powers: Vec<f64> = (0..6).map(|j| f.dotc(&w.column(j)).norm_sqr()).collect();
    let total: f64 = powers.iter().sum();
    let expected = powers[1] / (total - powers[1] + 0.3);
    assert!((sinr_from(&f, &w, 1, 0.3) - expected).abs() < 1e-12);
    let by_hand = (1.0 + expected).log2();
    let f0 = CVector::zeros(4);
    // A zero channel contributes nothing, so the sum rate is the one user.
    assert!((sum_rate_from(&[f0, f.clone()], &w, &[0.3, 0.3]) - by_hand).abs() < 1e-12);
    assert!((beampattern_from(&f, &w) - total).abs() < 1e-9);
}

#[test]
fn effective_channel_differences_track_rotation_gradient() {
    // Directional derivative of the rate along a random 6-direction against
    // the analytic gradient projected on it.
    let cfg = ScenarioConfig {
        bs_directivity_exponent: 2.0,
        ris_directivity_exponent: 2.0,
        ..Default::default()
    };
    let s = sample_scenario(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = phases(&(0..36).map(|_| rng.random_range(-PI..PI)).collect::<Vec<_>>());
    let w = CMatrix::from_fn(4, 6, |_, _| C64::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    let open = isac_rotate::geometry::RotationBox::symmetric(PI);
    let problem = RotationProblem::new(&s, &w, &theta, 0.0, &open, &open);
    let mut tested = 0;
    while tested < 20 {
        let r = Vector6::from_fn(|_, _| rng.random_range(-0.8..0.8));
        let (bs, ris) = isac_rotate::rotation::unstack(&r);
        if s.visibility_margin(&bs, &ris) < 1e-2 {
            continue;
        }
        let dir = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let (_, g) = problem.objective_gradient(&r);
        let h = 1e-5;
        let rate = |x: &Vector6<f64>| {
            let (b, q) = isac_rotate::rotation::unstack(x);
            let f: Vec<CVector> = (0..2).map(|k| effective_channel(&s, k, &b, &q, &theta)).collect();
            sum_rate_from(&f, &w, &[1e-6, 1e-6])
        };
        let fd = (rate(&(r + dir * h)) - rate(&(r - dir * h))) / (2.0 * h);
        let an = g.dot(&dir);
        assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "{fd} vs {an}");
        tested += 1;
    }
}

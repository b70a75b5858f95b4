//! Single user, single path, single directional BS element, no RIS: the rate
//! only depends on the element gain toward the path, so the best BS rotation
//! points the boresight against the path direction. A 3° grid search over
//! the two tilt angles is the oracle.

use isac_rotate::channel::{sample_scenario, Scenario, ScenarioConfig};
use isac_rotate::geometry::{boresight, direction_vector, EulerAngles, RotationBox};
use isac_rotate::linalg::{CMatrix, C64};
use isac_rotate::metrics::SolutionState;
use isac_rotate::rotation::{solve_rotations, stack, RotationConfig, RotationProblem};

fn toy(elevation: f64, azimuth: f64) -> Scenario {
    let cfg = ScenarioConfig {
        num_users: 1,
        bs_rows: 1,
        bs_cols: 1,
        direct_paths: 1,
        bs_directivity_exponent: 2.0,
        ris_directivity_exponent: 2.0,
        ..Default::default()
    };
    let mut s = sample_scenario(&cfg, 5).unwrap().without_ris_user_links();
    s.users[0].direct[0].elevation = elevation;
    s.users[0].direct[0].azimuth = azimuth;
    s.mse_threshold = f64::INFINITY;
    s
}

fn angle_between(a: &nalgebra::Vector3<f64>, b: &nalgebra::Vector3<f64>) -> f64 {
    a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos()
}

#[test]
fn boresight_turns_against_the_path() {
    for (el, az) in [(-0.7, 1.0), (-1.1, -2.0), (-0.4, 2.8)] {
        let s = toy(el, az);
        let target = -*direction_vector(el, az).as_vector();
        // No sensing power: it would interfere with the user through the
        // same gain and flatten the rate in the rotation.
        let w = CMatrix::from_row_slice(1, 2, &[C64::new(0.8, 0.0), C64::new(0.0, 0.0)]);
        let mut st = SolutionState::initial(&s, 0.0);
        st.precoder = w.clone();
        let bx = RotationBox::symmetric(std::f64::consts::FRAC_PI_2);
        let fixed = RotationBox::fixed();

        let problem = RotationProblem::new(&s, &w, &st.ris_phases, 0.0, &bx, &fixed);
        let step = 3f64.to_radians();
        let mut best = (f64::NEG_INFINITY, EulerAngles::ZERO);
        for i in -30..=30 {
            for j in -30..=30 {
                let a = EulerAngles::new(i as f64 * step, j as f64 * step, 0.0);
                let f = problem.objective(&stack(&a, &EulerAngles::ZERO));
                if f > best.0 {
                    best = (f, a);
                }
            }
        }
        let grid_err = angle_between(boresight(&best.1).as_vector(), &target);
        assert!(grid_err <= 3f64.to_radians(), "grid optimum {grid_err} rad off");

        let out = solve_rotations(&s, &st, &bx, &fixed, &RotationConfig::default()).unwrap();
        let f = problem.objective(&stack(&out.bs, &out.ris));
        assert!(f >= best.0 - 1e-6 * best.0.abs(), "solver {f} below grid {}", best.0);
        let err = angle_between(boresight(&out.bs).as_vector(), &target);
        assert!(err <= 1f64.to_radians(), "solver boresight {err} rad off");
    }
}

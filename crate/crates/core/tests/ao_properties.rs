//! Whole-loop properties of the alternating optimization.

use isac_rotate::ao::{evaluate_baseline, run_ao, run_ao_in_boxes, AoConfig, Architecture};
use isac_rotate::channel::{sample_scenario, ScenarioConfig};
use isac_rotate::geometry::RotationBox;
use isac_rotate::linalg::frobenius_sq;
use isac_rotate::metrics::{evaluate, SolutionState};
use isac_rotate::precoder::{fit_to_threshold, initial_precoder, solve_precoder_from, PrecoderProblem};

#[test]
fn frozen_blocks_reduce_to_repeated_precoder_solves() {
    let s = sample_scenario(&ScenarioConfig::default(), 12).unwrap();
    let cfg = AoConfig {
        optimize_ris: false,
        optimize_rotations: false,
        ..Default::default()
    };
    let fixed = RotationBox::fixed();
    let st = run_ao_in_boxes(&s, &fixed, &fixed, &cfg).unwrap();

    // The same schedule written out by hand around the W-block alone.
    let mut manual = SolutionState::initial(&s, cfg.rho0);
    let ch = manual.channels(&s, false);
    let mut rho = cfg.rho0;
    let p0 = PrecoderProblem::new(&s, &ch, &manual.ris_phases, rho);
    let mut w = fit_to_threshold(&p0, &initial_precoder(&p0.f_users, &p0.noise, p0.power_budget));
    for _ in 0..st.outer_iterations {
        let p = PrecoderProblem::new(&s, &ch, &manual.ris_phases, rho);
        w = solve_precoder_from(&p, &w, &cfg.precoder).unwrap().precoder;
        if p.mse(&w) > s.mse_threshold {
            rho = (rho * cfg.gamma_rho).min(cfg.rho_max);
        }
    }
    manual.precoder = w;
    assert_eq!(manual.precoder, st.precoder);
    assert!(st.ris_phases.iter().all(|z| z.re == 1.0 && z.im == 0.0));
}

#[test]
fn terminal_state_invariants_hold_for_every_architecture() {
    let cfg = ScenarioConfig {
        bs_directivity_exponent: 2.0,
        ris_directivity_exponent: 2.0,
        ..Default::default()
    };
    let s = sample_scenario(&cfg, 3).unwrap();
    for arch in Architecture::ALL {
        let st = evaluate_baseline(&s, &AoConfig::default(), arch).unwrap();
        assert!(frobenius_sq(&st.precoder) <= s.power_budget * (1.0 + 1e-9));
        assert!(st.ris_phases.iter().all(|z| (z.norm() - 1.0).abs() <= 1e-12));
        assert!(s.bs_box.contains(&st.bs_angles) && s.ris_box.contains(&st.ris_angles));
        assert_eq!(st.feasible, st.mse <= s.mse_threshold);
        let reported = if arch.has_ris() { evaluate(&s, &st) } else { evaluate(&s.without_ris_user_links(), &st) };
        assert_eq!(reported.sum_rate, st.sum_rate, "{arch}");
        if !arch.rotates_bs() {
            assert_eq!(st.bs_angles, Default::default());
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let s = sample_scenario(&ScenarioConfig::default(), 9).unwrap();
    let a = run_ao(&s, &AoConfig::default()).unwrap();
    let b = run_ao(&s, &AoConfig::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn extra_starts_never_lose() {
    let s = sample_scenario(&ScenarioConfig::default(), 4).unwrap();
    let one = run_ao(&s, &AoConfig::default()).unwrap();
    let three = run_ao(
        &s,
        &AoConfig {
            multi_start: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((three.feasible, three.sum_rate) >= (one.feasible, one.sum_rate));
}

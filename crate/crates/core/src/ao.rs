//! Penalty-assisted alternating optimization over `W → θ → r` and the six
//! array architectures compared in the experiments.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::Scenario;
use crate::error::{Error, Result};
use crate::geometry::RotationBox;
use crate::linalg::CVector;
use crate::metrics::{evaluate_with, noise_variances, Metrics, OuterRecord, SolutionState};
use crate::precoder::{fit_to_threshold, initial_precoder, solve_precoder_from, PrecoderConfig, PrecoderProblem};
use crate::ris::{build_quadratics, phases, solve_ris_forms, RisConfig};
use crate::rotation::{solve_rotations, RotationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AoConfig {
    pub rho0: f64,
    pub gamma_rho: f64,
    pub rho_max: f64,
    pub epsilon_ao: f64,
    pub max_outer_iterations: usize,
    /// Decrease of the objective across a block tolerated as roundoff.
    pub monotonicity_slack: f64,
    pub optimize_ris: bool,
    pub optimize_rotations: bool,
    /// Number of RIS phase initializations (the first is all ones, the rest
    /// random). A feasible run beats an infeasible one, then the higher rate.
    pub multi_start: usize,
    pub precoder: PrecoderConfig,
    pub ris: RisConfig,
    pub rotation: RotationConfig,
}

impl Default for AoConfig {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            gamma_rho: 5.0,
            rho_max: 1e6,
            epsilon_ao: 1e-3,
            max_outer_iterations: 30,
            monotonicity_slack: 1e-7,
            optimize_ris: true,
            optimize_rotations: true,
            multi_start: 1,
            precoder: PrecoderConfig::default(),
            ris: RisConfig::default(),
            rotation: RotationConfig::default(),
        }
    }
}

impl AoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0) || !(self.gamma_rho > 1.0) || !(self.rho_max >= self.rho0) {
            return Err(Error::InvalidConfig(
                "penalty schedule needs rho0 > 0, gamma_rho > 1 and rho_max >= rho0".into(),
            ));
        }
        if !(self.epsilon_ao > 0.0) || self.max_outer_iterations == 0 || self.multi_start == 0 {
            return Err(Error::InvalidConfig(
                "epsilon_ao, max_outer_iterations and multi_start must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_ascent(block: &'static str, before: f64, after: f64, slack: f64) -> Result<()> {
    if after < before - slack * before.abs().max(1.0) {
        return Err(Error::AscentViolation { block, before, after });
    }
    Ok(())
}

/// Runs the alternating loop inside the given rotation boxes.
pub fn run_ao_in_boxes(
    scenario: &Scenario,
    bs_box: &RotationBox,
    ris_box: &RotationBox,
    config: &AoConfig,
) -> Result<SolutionState> {
    scenario.validate()?;
    config.validate()?;
    let mut best: Option<SolutionState> = None;
    for start in 0..config.multi_start {
        let theta0 = if start == 0 {
            CVector::from_element(scenario.ris_elements(), crate::linalg::real(1.0))
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed ^ (start as u64).rotate_left(32));
            let n = scenario.ris_elements();
            phases(&(0..n).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect::<Vec<_>>())
        };
        let state = run_single(scenario, bs_box, ris_box, config, theta0)?;
        let better = match &best {
            None => true,
            Some(b) => (state.feasible, state.sum_rate) > (b.feasible, b.sum_rate),
        };
        if better {
            best = Some(state);
        }
    }
    Ok(best.expect("multi_start is positive"))
}

fn run_single(
    scenario: &Scenario,
    bs_box: &RotationBox,
    ris_box: &RotationBox,
    config: &AoConfig,
    theta0: CVector,
) -> Result<SolutionState> {
    let mut state = SolutionState::initial(scenario, config.rho0);
    state.ris_phases = theta0;
    state.bs_angles = bs_box.clamp(&state.bs_angles);
    state.ris_angles = ris_box.clamp(&state.ris_angles);
    {
        let ch = state.channels(scenario, false);
        state.precoder = initial_precoder(
            &ch.effective_users(&state.ris_phases),
            &noise_variances(scenario),
            scenario.power_budget,
        );
        if config.precoder.fit_initial_power {
            let problem = PrecoderProblem::new(scenario, &ch, &state.ris_phases, state.penalty_weight);
            state.precoder = fit_to_threshold(&problem, &state.precoder);
        }
    }
    let slack = config.monotonicity_slack;
    let mut last = Metrics {
        sum_rate: 0.0,
        mse: f64::INFINITY,
        objective: f64::NEG_INFINITY,
    };
    for outer in 0..config.max_outer_iterations {
        let rho = state.penalty_weight;
        let ch = state.channels(scenario, false);
        let start = evaluate_with(scenario, &ch, &state.precoder, &state.ris_phases, rho);

        let problem = PrecoderProblem::new(scenario, &ch, &state.ris_phases, rho);
        let report = solve_precoder_from(&problem, &state.precoder, &config.precoder)?;
        state.precoder = report.precoder;
        let after_precoder = evaluate_with(scenario, &ch, &state.precoder, &state.ris_phases, rho).objective;
        check_ascent("precoder", start.objective, after_precoder, slack)?;

        let mut after_ris = after_precoder;
        if config.optimize_ris {
            let forms = build_quadratics(scenario, &ch, &state.precoder);
            let report = solve_ris_forms(&forms, &state.ris_phases, rho, scenario.mse_threshold, &config.ris)?;
            let candidate = evaluate_with(scenario, &ch, &state.precoder, &report.theta, rho).objective;
            // Keep the old phases if roundoff between the two evaluation paths
            // would register a loss.
            if candidate >= after_precoder {
                state.ris_phases = report.theta;
                after_ris = candidate;
            }
        }

        let mut after_rotation = after_ris;
        if config.optimize_rotations {
            let report = solve_rotations(scenario, &state, bs_box, ris_box, &config.rotation)?;
            let ch_new = scenario.channels(&report.bs, &report.ris, false);
            let candidate = evaluate_with(scenario, &ch_new, &state.precoder, &state.ris_phases, rho).objective;
            if candidate >= after_ris {
                state.bs_angles = report.bs;
                state.ris_angles = report.ris;
                after_rotation = candidate;
            }
        }
        check_ascent("rotation", after_ris, after_rotation, slack)?;

        let ch = state.channels(scenario, false);
        last = evaluate_with(scenario, &ch, &state.precoder, &state.ris_phases, rho);
        state.trace.push(OuterRecord {
            rho,
            objective_start: start.objective,
            after_precoder,
            after_ris,
            after_rotation,
            sum_rate: last.sum_rate,
            mse: last.mse,
        });
        state.outer_iterations = outer + 1;
        log::debug!(
            "outer {} rho {:.3e} objective {:.6} rate {:.6} mse {:.4e}",
            outer + 1,
            rho,
            last.objective,
            last.sum_rate,
            last.mse
        );

        if last.mse > scenario.mse_threshold {
            state.penalty_weight = (rho * config.gamma_rho).min(config.rho_max);
            continue;
        }
        let increase = (last.objective - start.objective) / start.objective.abs().max(1e-12);
        if increase < config.epsilon_ao {
            break;
        }
    }
    state.sum_rate = last.sum_rate;
    state.mse = last.mse;
    state.feasible = last.mse <= scenario.mse_threshold;
    if !state.feasible {
        log::warn!(
            "sensing MSE {:.4e} above threshold {} after {} outer iterations",
            last.mse,
            scenario.mse_threshold,
            state.outer_iterations
        );
    }
    Ok(state)
}

/// Runs the alternating loop inside the scenario's own rotation boxes.
pub fn run_ao(scenario: &Scenario, config: &AoConfig) -> Result<SolutionState> {
    run_ao_in_boxes(scenario, &scenario.bs_box, &scenario.ris_box, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    RotBsRotRis,
    RotBsFixRis,
    FixBsRotRis,
    FixBsFixRis,
    RotBsNoRis,
    FixBsNoRis,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::RotBsRotRis,
        Architecture::RotBsFixRis,
        Architecture::FixBsRotRis,
        Architecture::FixBsFixRis,
        Architecture::RotBsNoRis,
        Architecture::FixBsNoRis,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Architecture::RotBsRotRis => "Rot-BS+Rot-RIS",
            Architecture::RotBsFixRis => "Rot-BS+Fix-RIS",
            Architecture::FixBsRotRis => "Fix-BS+Rot-RIS",
            Architecture::FixBsFixRis => "Fix-BS+Fix-RIS",
            Architecture::RotBsNoRis => "Rot-BS+No-RIS",
            Architecture::FixBsNoRis => "Fix-BS+No-RIS",
        }
    }

    pub fn rotates_bs(self) -> bool {
        matches!(
            self,
            Architecture::RotBsRotRis | Architecture::RotBsFixRis | Architecture::RotBsNoRis
        )
    }

    pub fn rotates_ris(self) -> bool {
        matches!(self, Architecture::RotBsRotRis | Architecture::FixBsRotRis)
    }

    pub fn has_ris(self) -> bool {
        !matches!(self, Architecture::RotBsNoRis | Architecture::FixBsNoRis)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown architecture '{s}', expected one of {}",
                    Architecture::ALL.map(|a| a.label()).join(", ")
                ))
            })
    }
}

/// Solves one architecture. Fixed arrays get the box `{0}`; without a RIS
/// the RIS-user gains are zeroed, the phases stay at one and the RIS is not
/// rotated.
pub fn evaluate_baseline(scenario: &Scenario, config: &AoConfig, architecture: Architecture) -> Result<SolutionState> {
    let bs_box = if architecture.rotates_bs() {
        scenario.bs_box
    } else {
        RotationBox::fixed()
    };
    let ris_box = if architecture.rotates_ris() {
        scenario.ris_box
    } else {
        RotationBox::fixed()
    };
    if architecture.has_ris() {
        run_ao_in_boxes(scenario, &bs_box, &ris_box, config)
    } else {
        let reduced = scenario.without_ris_user_links();
        let cfg = AoConfig {
            optimize_ris: false,
            multi_start: 1,
            ..*config
        };
        run_ao_in_boxes(&reduced, &bs_box, &ris_box, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_scenario, ScenarioConfig};
    use crate::linalg::frobenius_sq;

    #[test]
    fn architecture_labels_roundtrip() {
        for a in Architecture::ALL {
            assert_eq!(a.label().parse::<Architecture>().unwrap(), a);
        }
        assert!("Rot-BS".parse::<Architecture>().is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let s = sample_scenario(&ScenarioConfig::default(), 0).unwrap();
        let cfg = AoConfig {
            gamma_rho: 1.0,
            ..Default::default()
        };
        assert!(run_ao(&s, &cfg).is_err());
    }

    #[test]
    fn default_run_is_feasible_and_monotone() {
        let s = sample_scenario(&ScenarioConfig::default(), 7).unwrap();
        let st = run_ao(&s, &AoConfig::default()).unwrap();
        assert!(st.feasible, "mse {}", st.mse);
        assert!(st.mse <= 0.2);
        assert!(frobenius_sq(&st.precoder) <= s.power_budget * (1.0 + 1e-9));
        assert!(st.ris_phases.iter().all(|z| (z.norm() - 1.0).abs() <= 1e-12));
        assert!(s.bs_box.contains(&st.bs_angles) && s.ris_box.contains(&st.ris_angles));
        for rec in &st.trace {
            assert!(rec.after_precoder >= rec.objective_start - 1e-7 * rec.objective_start.abs().max(1.0));
            assert!(rec.after_ris >= rec.after_precoder);
            assert!(rec.after_rotation >= rec.after_ris);
        }
    }

    #[test]
    fn infinite_threshold_never_raises_penalty() {
        let mut s = sample_scenario(&ScenarioConfig::default(), 2).unwrap();
        s.mse_threshold = f64::INFINITY;
        let st = run_ao(&s, &AoConfig::default()).unwrap();
        assert!(st.trace.iter().all(|r| r.rho == 1.0));
        assert!(st.feasible);
    }

    #[test]
    fn no_ris_baseline_keeps_unit_phases() {
        let s = sample_scenario(&ScenarioConfig::default(), 3).unwrap();
        let st = evaluate_baseline(&s, &AoConfig::default(), Architecture::FixBsNoRis).unwrap();
        assert!(st.ris_phases.iter().all(|z| *z == crate::linalg::real(1.0)));
        assert_eq!(st.bs_angles, crate::geometry::EulerAngles::ZERO);
    }
}

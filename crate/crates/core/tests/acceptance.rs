//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when any
//! criterion fails.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Instant;

use isac_rotate::ao::{evaluate_baseline, run_ao, AoConfig, Architecture};
use isac_rotate::channel::{sample_scenario, ScenarioConfig};
use isac_rotate::checks::{certificate_suite, gradient_suite, lipschitz_suite, CheckOutcome};
use isac_rotate::geometry::{EulerAngles, RotationBox};
use isac_rotate::harness::{run_experiment, ArchitectureSpec, ExperimentSpec, ResultRow, SweepVariable};
use isac_rotate::linalg::{CVector, C64};

const SEEDS: usize = 30;
const POWERS: [f64; 5] = [10.0, 15.0, 20.0, 25.0, 30.0];

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, passed: bool, detail: String) {
        println!("{} [{id}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failures += 1;
        }
    }

    fn suite(&mut self, id: u32, name: &str, outcomes: &[CheckOutcome], extra_ok: bool, extra: String) {
        let passed = outcomes.iter().all(|c| c.passed) && extra_ok;
        let mut detail = outcomes
            .iter()
            .map(|c| format!("{} {}", c.name, if c.passed { "ok" } else { "FAILED" }))
            .collect::<Vec<_>>()
            .join("; ");
        if !extra.is_empty() {
            detail = format!("{detail}; {extra}");
        }
        self.line(id, name, passed, detail);
        for c in outcomes {
            println!("       {}: {}", c.name, c.detail);
        }
    }
}

fn directional(p: f64) -> ScenarioConfig {
    ScenarioConfig {
        bs_directivity_exponent: p,
        ris_directivity_exponent: p,
        ..Default::default()
    }
}

fn arch(label: &str) -> ArchitectureSpec {
    label.parse().expect("valid architecture label")
}

/// Mean sum rate per (value, architecture) over successful rows.
fn means(rows: &[ResultRow]) -> BTreeMap<(u64, String), f64> {
    let mut acc: BTreeMap<(u64, String), (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        let e = acc.entry((r.sweep_value.to_bits(), r.architecture.clone())).or_default();
        e.0 += r.sum_rate;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn mean_at(m: &BTreeMap<(u64, String), f64>, value: f64, arch: &str) -> f64 {
    m[&(value.to_bits(), arch.to_string())]
}

fn criterion_monotonicity(report: &mut Report) {
    let cfg = ScenarioConfig::default();
    let ao = AoConfig::default();
    let mut feasible = 0;
    let mut violations = Vec::new();
    let mut slowest: f64 = 0.0;
    let mut errors = Vec::new();
    let mut flagged = Vec::new();
    for seed in 0..20u64 {
        let s = sample_scenario(&cfg, seed).expect("default scenario");
        let t0 = Instant::now();
        let st = match run_ao(&s, &ao) {
            Ok(st) => st,
            Err(e) => {
                errors.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        slowest = slowest.max(t0.elapsed().as_secs_f64());
        let tol = |f: f64| 1e-7 * f.abs().max(1.0);
        for (i, r) in st.trace.iter().enumerate() {
            let steps = [
                ("precoder", r.objective_start, r.after_precoder),
                ("ris", r.after_precoder, r.after_ris),
                ("rotation", r.after_ris, r.after_rotation),
            ];
            for (block, before, after) in steps {
                if after < before - tol(before) {
                    violations.push(format!("seed {seed} outer {i} {block}: {before} -> {after}"));
                }
            }
            if let Some(next) = st.trace.get(i + 1) {
                if next.rho == r.rho && next.after_rotation < r.after_rotation - tol(r.after_rotation) {
                    violations.push(format!("seed {seed} outers {i}->{}", i + 1));
                }
            }
        }
        if st.feasible && st.mse <= 0.2 {
            feasible += 1;
        } else {
            flagged.push(format!("seed {seed} mse {:.4}", st.mse));
        }
    }
    let passed = violations.is_empty() && errors.is_empty() && feasible >= 18 && slowest < 30.0;
    let mut detail = format!(
        "{feasible}/20 feasible, {} monotonicity violations, slowest run {slowest:.2} s",
        violations.len()
    );
    if !flagged.is_empty() {
        detail += &format!(", flagged infeasible: {}", flagged.join(", "));
    }
    if !errors.is_empty() {
        detail += &format!(", errors: {}", errors.join("; "));
    }
    for v in violations.iter().take(5) {
        detail += &format!("\n       {v}");
    }
    report.line(4, "monotonicity and feasibility", passed, detail);
}

fn criterion_trends(report: &mut Report) -> (f64, usize) {
    let spec = ExperimentSpec {
        sweep_variable: SweepVariable::PowerDbm,
        sweep_values: POWERS.to_vec(),
        architectures: Architecture::ALL
            .into_iter()
            .map(|a| ArchitectureSpec {
                architecture: a,
                ris_range_deg: None,
            })
            .collect(),
        num_realizations: SEEDS,
        base: directional(2.0),
        output: None,
        seed_base: 0,
        solver: AoConfig::default(),
    };
    let rows = run_experiment(&spec, 1).expect("power sweep runs");
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    let m = means(&rows);
    let mut problems = Vec::new();
    for a in Architecture::ALL {
        for w in POWERS.windows(2) {
            let (lo, hi) = (mean_at(&m, w[0], a.label()), mean_at(&m, w[1], a.label()));
            if hi < lo {
                problems.push(format!("{} drops {lo:.4} -> {hi:.4} from {} to {} dBm", a.label(), w[0], w[1]));
            }
        }
    }
    let mut table = String::new();
    for p in POWERS {
        let full = mean_at(&m, p, "Rot-BS+Rot-RIS");
        let fixed = mean_at(&m, p, "Fix-BS+Fix-RIS");
        let bare = mean_at(&m, p, "Fix-BS+No-RIS");
        if !(full >= fixed && fixed >= bare) {
            problems.push(format!("order broken at {p} dBm: {full:.4}, {fixed:.4}, {bare:.4}"));
        }
        table += &format!("\n       {p} dBm:");
        for a in Architecture::ALL {
            table += &format!(" {}={:.3}", a.label(), mean_at(&m, p, a.label()));
        }
    }
    let passed = problems.is_empty() && failed == 0;
    let mut detail = format!("{SEEDS} paired seeds, {} rows, {failed} failed solves", rows.len());
    for p in &problems {
        detail += &format!("\n       {p}");
    }
    detail += &table;
    report.line(5, "power trends and architecture ordering (p=2)", passed, detail);
    let gap = (mean_at(&m, 30.0, "Fix-BS+Rot-RIS") - mean_at(&m, 30.0, "Fix-BS+Fix-RIS")).abs();
    (gap, failed)
}

fn criterion_isotropic(report: &mut Report, directional_gap: f64, directional_failed: usize) {
    let spec = ExperimentSpec {
        sweep_variable: SweepVariable::PowerDbm,
        sweep_values: vec![30.0],
        architectures: vec![arch("Fix-BS+Rot-RIS"), arch("Fix-BS+Fix-RIS")],
        num_realizations: SEEDS,
        base: directional(0.0),
        output: None,
        seed_base: 0,
        solver: AoConfig::default(),
    };
    let rows = run_experiment(&spec, 1).expect("isotropic runs");
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    let m = means(&rows);
    let gap = (mean_at(&m, 30.0, "Fix-BS+Rot-RIS") - mean_at(&m, 30.0, "Fix-BS+Fix-RIS")).abs();
    report.line(
        6,
        "isotropic RIS-rotation gap below directional gap",
        gap < directional_gap && failed == 0 && directional_failed == 0,
        format!("|gap| isotropic {gap:.4} vs directional {directional_gap:.4} bits/s/Hz at 30 dBm, {SEEDS} seeds"),
    );
}

fn criterion_saturation(report: &mut Report) {
    let spec = ExperimentSpec {
        sweep_variable: SweepVariable::RotationRangeDeg,
        sweep_values: vec![45.0, 90.0],
        architectures: vec![arch("Rot-BS+Rot-RIS@45"), arch("Rot-BS+Rot-RIS@90")],
        num_realizations: SEEDS,
        base: directional(2.0),
        output: None,
        seed_base: 0,
        solver: AoConfig::default(),
    };
    let rows = run_experiment(&spec, 1).expect("rotation range runs");
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    let m = means(&rows);
    let mut passed = failed == 0;
    let mut detail = format!("{SEEDS} seeds");
    for zeta in [45.0, 90.0] {
        let a = mean_at(&m, zeta, "Rot-BS+Rot-RIS@45");
        let b = mean_at(&m, zeta, "Rot-BS+Rot-RIS@90");
        let rel = (a - b).abs() / a.max(b);
        passed &= rel < 0.05;
        detail += &format!("; BS range {zeta}°: RIS 45° {a:.4}, RIS 90° {b:.4}, relative gap {:.2}%", 100.0 * rel);
    }
    report.line(7, "RIS rotation range saturation", passed, detail);
}

fn criterion_baselines(report: &mut Report) {
    let ao = AoConfig::default();
    let mut mismatches = Vec::new();
    for seed in [1u64, 5, 9] {
        let s = sample_scenario(&directional(2.0), seed).expect("scenario");
        let mut pinned = s.clone();
        pinned.bs_box = RotationBox::fixed();
        pinned.ris_box = RotationBox::fixed();
        let pairs = [
            (Architecture::RotBsRotRis, Architecture::FixBsFixRis),
            (Architecture::RotBsFixRis, Architecture::FixBsFixRis),
            (Architecture::FixBsRotRis, Architecture::FixBsFixRis),
            (Architecture::RotBsNoRis, Architecture::FixBsNoRis),
        ];
        for (rot, fix) in pairs {
            let a = evaluate_baseline(&pinned, &ao, rot).expect("solve");
            let b = evaluate_baseline(&s, &ao, fix).expect("solve");
            let ja = serde_json::to_string(&a).expect("json");
            let jb = serde_json::to_string(&b).expect("json");
            if ja != jb {
                mismatches.push(format!("seed {seed}: {} with {{0}} vs {}", rot.label(), fix.label()));
            }
        }
    }
    let mut direct_mismatch = 0;
    let mut checked = 0;
    for seed in 0..10u64 {
        let s = sample_scenario(&directional(2.0), seed).expect("scenario").without_ris_user_links();
        let rb = EulerAngles::new(0.1 * seed as f64, -0.2, 0.3);
        let rr = EulerAngles::new(0.4, 0.05 * seed as f64, -0.1);
        let ch = s.channels(&rb, &rr, false);
        let theta = CVector::from_iterator(
            s.ris_elements(),
            (0..s.ris_elements()).map(|i| C64::from_polar(1.0, 0.37 * i as f64 + seed as f64)),
        );
        for (k, f) in ch.effective_users(&theta).iter().enumerate() {
            checked += 1;
            if f != &ch.h[k] {
                direct_mismatch += 1;
            }
        }
    }
    let passed = mismatches.is_empty() && direct_mismatch == 0;
    let mut detail = format!(
        "{} Rot-with-{{0}} vs Fix pairs bit-identical; No-RIS f_k == h_k for {}/{checked} users",
        12 - mismatches.len(),
        checked - direct_mismatch
    );
    for m in &mismatches {
        detail += &format!("\n       {m}");
    }
    report.line(8, "baseline identities", passed, detail);
}

/// CSV text with the timing column removed.
fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.pop();
            cols.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_determinism(report: &mut Report) {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = ExperimentSpec {
        sweep_variable: SweepVariable::PowerDbm,
        sweep_values: vec![15.0, 30.0],
        architectures: vec![arch("Rot-BS+Rot-RIS"), arch("Fix-BS+Rot-RIS@45"), arch("Fix-BS+No-RIS")],
        num_realizations: 3,
        base: directional(2.0),
        output: None,
        seed_base: 11,
        solver: AoConfig::default(),
    };
    let spec_path = dir.path().join("spec.json");
    spec.save(&spec_path).expect("write spec");
    let bin = env!("CARGO_BIN_EXE_isac-rotate");
    let mut outputs = Vec::new();
    let mut detail = String::new();
    for (i, jobs) in ["1", "1", "4"].into_iter().enumerate() {
        let out = dir.path().join(format!("rows{i}.csv"));
        let status = Command::new(bin)
            .args(["run", "--config"])
            .arg(&spec_path)
            .arg("--out")
            .arg(&out)
            .args(["--jobs", jobs])
            .output()
            .expect("run binary");
        if !status.status.success() {
            detail += &format!("run {i} exited with {:?}; ", status.status.code());
        }
        outputs.push(std::fs::read_to_string(&out).unwrap_or_default());
    }
    let stripped: Vec<String> = outputs.iter().map(|o| strip_timing(o)).collect();
    let rows = stripped[0].lines().count().saturating_sub(1);
    let passed = detail.is_empty() && rows == 18 && stripped[0] == stripped[1] && stripped[0] == stripped[2];
    detail += &format!(
        "{rows} rows; repeat identical: {}; --jobs 1 vs --jobs 4 identical: {}",
        stripped[0] == stripped[1],
        stripped[0] == stripped[2]
    );
    report.line(9, "CSV determinism", passed, detail);
}

fn main() {
    let mut report = Report { failures: 0 };
    let t0 = Instant::now();

    let t = Instant::now();
    let grads = gradient_suite(1);
    let secs = t.elapsed().as_secs_f64();
    report.suite(1, "gradient suite", &grads, secs < 60.0, format!("{secs:.2} s"));
    report.suite(2, "Lipschitz and MM bound", &lipschitz_suite(1), true, String::new());
    report.suite(3, "solver certificates", &certificate_suite(1), true, String::new());

    criterion_monotonicity(&mut report);
    let (gap, failed) = criterion_trends(&mut report);
    criterion_isotropic(&mut report, gap, failed);
    criterion_saturation(&mut report);
    criterion_baselines(&mut report);
    criterion_determinism(&mut report);

    println!(
        "acceptance: {} of 9 criteria failed ({:.0} s)",
        report.failures,
        t0.elapsed().as_secs_f64()
    );
    if report.failures > 0 {
        std::process::exit(1);
    }
}

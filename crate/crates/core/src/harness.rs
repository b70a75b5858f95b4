//! Experiment runner: parameter sweeps over paired seeds, Monte-Carlo
//! summaries and CSV/JSON persistence.
//!
//! CSV columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `sweep_value` | value of the swept parameter |
//! | `architecture` | architecture label, with `@<deg>` when the RIS range is overridden |
//! | `seed` | scenario seed |
//! | `scenario_hash` | SHA-256 of the sampled scenario, shared by all rows of one (value, seed) |
//! | `sum_rate` | bits/s/Hz |
//! | `mse` | beampattern MSE |
//! | `feasible` | `true` when the MSE meets the threshold |
//! | `outer_iterations` | AO passes used |
//! | `status` | `ok`, or the error text of a failed solve |
//! | `wall_time_seconds` | solve time, the only nondeterministic column |
//!
//! Floats are written with 17 significant digits so rows parse back to the
//! same bits.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ao::{evaluate_baseline, AoConfig, Architecture};
use crate::channel::{sample_scenario, Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::geometry::RotationBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    PowerDbm,
    /// Columns of a single-row BS array.
    AntennasMy,
    UsersK,
    /// Symmetric BS rotation range in degrees.
    RotationRangeDeg,
}

impl SweepVariable {
    /// Scenario configuration for one sweep value.
    pub fn apply(self, base: &ScenarioConfig, value: f64) -> Result<ScenarioConfig> {
        let mut cfg = base.clone();
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidConfig(format!("{self} needs positive integer values, got {value}")))
            }
        };
        match self {
            SweepVariable::PowerDbm => cfg.power_dbm = value,
            SweepVariable::AntennasMy => {
                cfg.bs_rows = 1;
                cfg.bs_cols = count()?;
            }
            SweepVariable::UsersK => cfg.num_users = count()?,
            SweepVariable::RotationRangeDeg => cfg.bs_rotation_range_deg = value,
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::PowerDbm => "power_dbm",
            SweepVariable::AntennasMy => "antennas_my",
            SweepVariable::UsersK => "users_k",
            SweepVariable::RotationRangeDeg => "rotation_range_deg",
        })
    }
}

/// An architecture with an optional RIS rotation range overriding the
/// scenario's. Written `Rot-BS+Rot-RIS@45`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchitectureSpec {
    pub architecture: Architecture,
    pub ris_range_deg: Option<f64>,
}

impl ArchitectureSpec {
    pub fn label(&self) -> String {
        match self.ris_range_deg {
            Some(deg) => format!("{}@{deg}", self.architecture.label()),
            None => self.architecture.label().to_string(),
        }
    }

    /// Solves this architecture on `scenario`.
    pub fn solve(&self, scenario: &Scenario, config: &AoConfig) -> Result<crate::metrics::SolutionState> {
        match self.ris_range_deg {
            None => evaluate_baseline(scenario, config, self.architecture),
            Some(deg) => {
                let mut s = scenario.clone();
                s.ris_box = RotationBox::symmetric(deg.to_radians());
                evaluate_baseline(&s, config, self.architecture)
            }
        }
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, range) = match s.split_once('@') {
            Some((n, r)) => {
                let deg: f64 = r
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad RIS range in '{s}'")))?;
                if !(deg >= 0.0 && deg.is_finite()) {
                    return Err(Error::InvalidConfig(format!("RIS range must be nonnegative in '{s}'")));
                }
                (n, Some(deg))
            }
            None => (s, None),
        };
        Ok(Self {
            architecture: name.parse()?,
            ris_range_deg: range,
        })
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for ArchitectureSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ArchitectureSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn all_architectures() -> Vec<ArchitectureSpec> {
    Architecture::ALL
        .into_iter()
        .map(|architecture| ArchitectureSpec {
            architecture,
            ris_range_deg: None,
        })
        .collect()
}

fn one() -> usize {
    1
}

/// One sweep. Loaded from JSON; `base` is a [`ScenarioConfig`] with power in
/// dBm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sweep_variable: SweepVariable,
    pub sweep_values: Vec<f64>,
    #[serde(default = "all_architectures")]
    pub architectures: Vec<ArchitectureSpec>,
    #[serde(default = "one")]
    pub num_realizations: usize,
    #[serde(default)]
    pub base: ScenarioConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default)]
    pub solver: AoConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sweep_values.is_empty() {
            return Err(Error::InvalidConfig("sweep_values is empty".into()));
        }
        if self.architectures.is_empty() {
            return Err(Error::InvalidConfig("architectures is empty".into()));
        }
        if self.num_realizations == 0 {
            return Err(Error::InvalidConfig("num_realizations must be at least 1".into()));
        }
        for &v in &self.sweep_values {
            self.sweep_variable.apply(&self.base, v)?.validate()?;
        }
        self.solver.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub architecture: String,
    pub seed: u64,
    pub scenario_hash: String,
    pub sum_rate: f64,
    pub mse: f64,
    pub feasible: bool,
    pub outer_iterations: usize,
    pub status: String,
    pub wall_time_seconds: f64,
}

pub const CSV_HEADER: [&str; 10] = [
    "sweep_value",
    "architecture",
    "seed",
    "scenario_hash",
    "sum_rate",
    "mse",
    "feasible",
    "outer_iterations",
    "status",
    "wall_time_seconds",
];

/// Float format used in CSV output.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl ResultRow {
    fn record(&self) -> [String; 10] {
        [
            format_float(self.sweep_value),
            self.architecture.clone(),
            self.seed.to_string(),
            self.scenario_hash.clone(),
            format_float(self.sum_rate),
            format_float(self.mse),
            self.feasible.to_string(),
            self.outer_iterations.to_string(),
            self.status.clone(),
            format_float(self.wall_time_seconds),
        ]
    }
}

/// SHA-256 of the scenario's JSON form, lowercase hex.
pub fn scenario_hash(scenario: &Scenario) -> String {
    let bytes = serde_json::to_vec(scenario).expect("scenario serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn solve_pair(spec: &ExperimentSpec, value: f64, seed: u64) -> Vec<ResultRow> {
    let failed = |arch: String, hash: String, msg: String| ResultRow {
        sweep_value: value,
        architecture: arch,
        seed,
        scenario_hash: hash,
        sum_rate: 0.0,
        mse: f64::INFINITY,
        feasible: false,
        outer_iterations: 0,
        status: msg,
        wall_time_seconds: 0.0,
    };
    let scenario = spec
        .sweep_variable
        .apply(&spec.base, value)
        .and_then(|cfg| sample_scenario(&cfg, seed));
    let scenario = match scenario {
        Ok(s) => s,
        Err(e) => {
            return spec
                .architectures
                .iter()
                .map(|a| failed(a.label(), String::new(), e.to_string()))
                .collect()
        }
    };
    let hash = scenario_hash(&scenario);
    spec.architectures
        .iter()
        .map(|arch| {
            let t0 = Instant::now();
            match arch.solve(&scenario, &spec.solver) {
                Ok(st) => ResultRow {
                    sweep_value: value,
                    architecture: arch.label(),
                    seed,
                    scenario_hash: hash.clone(),
                    sum_rate: st.sum_rate,
                    mse: st.mse,
                    feasible: st.feasible,
                    outer_iterations: st.outer_iterations,
                    status: "ok".into(),
                    wall_time_seconds: t0.elapsed().as_secs_f64(),
                },
                Err(e) => {
                    log::warn!("{} at {value} seed {seed}: {e}", arch.label());
                    failed(arch.label(), hash.clone(), e.to_string())
                }
            }
        })
        .collect()
}

/// Solves every (value, realization, architecture) triple. Realization `i`
/// uses seed `seed_base + i` at every sweep value, so all architectures and
/// values share channel draws. Rows come out ordered by value, then seed,
/// then architecture, whatever `jobs` is.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let pairs: Vec<(f64, u64)> = spec
        .sweep_values
        .iter()
        .flat_map(|&v| (0..spec.num_realizations as u64).map(move |i| (v, spec.seed_base + i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let rows: Vec<Vec<ResultRow>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(v, seed)| {
                log::info!("{} = {v}, seed {seed}", spec.sweep_variable);
                solve_pair(spec, v, seed)
            })
            .collect()
    });
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::InvalidConfig(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_rows(rows: &[ResultRow], path: &Path, format: OutputFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    match format {
        OutputFormat::Csv => write_csv(rows, &mut out)?,
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, rows).map_err(|e| Error::json(path, e))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::InvalidConfig(format!("unknown format '{s}', expected csv or json"))),
        }
    }
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { mean, std_error: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub architecture: String,
    pub count: usize,
    pub sum_rate: Estimate,
    pub mse: Estimate,
    pub feasible_fraction: f64,
}

/// Groups rows by (value, architecture) in order of first appearance.
/// Failed solves are counted but left out of the estimates.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, &str)> = Vec::new();
    for r in rows {
        let key = (r.sweep_value, r.architecture.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(v, arch)| {
            let group: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.sweep_value == v && r.architecture == arch)
                .collect();
            let ok: Vec<&&ResultRow> = group.iter().filter(|r| r.status == "ok").collect();
            let rates: Vec<f64> = ok.iter().map(|r| r.sum_rate).collect();
            let mses: Vec<f64> = ok.iter().map(|r| r.mse).collect();
            let nan = Estimate {
                mean: f64::NAN,
                std_error: f64::NAN,
            };
            SummaryRow {
                sweep_value: v,
                architecture: arch.to_string(),
                count: group.len(),
                sum_rate: if rates.is_empty() { nan } else { Estimate::of(&rates) },
                mse: if mses.is_empty() { nan } else { Estimate::of(&mses) },
                feasible_fraction: group.iter().filter(|r| r.feasible).count() as f64 / group.len() as f64,
            }
        })
        .collect()
}

/// The six figure parameterizations. Each follows its figure caption; the
/// last caption describes a user sweep at 2×2 and 30 dBm although the
/// accompanying text discusses the BS rotation range, so a rotation-range
/// experiment is emitted separately by [`rotation_range_experiment`].
pub fn default_experiments(num_realizations: usize) -> Vec<(String, ExperimentSpec)> {
    let power = |p: f64| ExperimentSpec {
        sweep_variable: SweepVariable::PowerDbm,
        sweep_values: vec![10.0, 15.0, 20.0, 25.0, 30.0],
        architectures: all_architectures(),
        num_realizations,
        base: ScenarioConfig {
            bs_directivity_exponent: p,
            ris_directivity_exponent: p,
            ..Default::default()
        },
        output: None,
        seed_base: 0,
        solver: AoConfig::default(),
    };
    let antennas = |p: f64| ExperimentSpec {
        sweep_variable: SweepVariable::AntennasMy,
        sweep_values: vec![2.0, 4.0, 6.0, 8.0],
        num_realizations,
        base: ScenarioConfig {
            num_users: 3,
            bs_rows: 1,
            bs_directivity_exponent: p,
            ris_directivity_exponent: p,
            ..Default::default()
        },
        ..power(p)
    };
    let users = |rows: usize, cols: usize, dbm: f64| ExperimentSpec {
        sweep_variable: SweepVariable::UsersK,
        sweep_values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        num_realizations,
        base: ScenarioConfig {
            bs_rows: rows,
            bs_cols: cols,
            power_dbm: dbm,
            bs_directivity_exponent: 2.0,
            ris_directivity_exponent: 2.0,
            ..Default::default()
        },
        ..power(2.0)
    };
    let mut out = vec![
        ("fig2_power_isotropic".to_string(), power(0.0)),
        ("fig3_power_directional".to_string(), power(2.0)),
        ("fig4_antennas_isotropic".to_string(), antennas(0.0)),
        ("fig5_antennas_directional".to_string(), antennas(2.0)),
        ("fig6_users_2x4_22dbm".to_string(), users(2, 4, 22.0)),
        ("fig7_users_2x2_30dbm".to_string(), users(2, 2, 30.0)),
    ];
    for (name, spec) in &mut out {
        spec.output = Some(PathBuf::from(format!("{name}.csv")));
    }
    out
}

/// BS rotation range sweep with RIS ranges of 45° and 90° plus the fixed
/// and RIS-free references.
pub fn rotation_range_experiment(num_realizations: usize) -> ExperimentSpec {
    let arch = |s: &str| s.parse::<ArchitectureSpec>().expect("valid label");
    ExperimentSpec {
        sweep_variable: SweepVariable::RotationRangeDeg,
        sweep_values: vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0],
        architectures: vec![
            arch("Rot-BS+Rot-RIS@90"),
            arch("Rot-BS+Rot-RIS@45"),
            arch("Rot-BS+Fix-RIS"),
            arch("Rot-BS+No-RIS"),
        ],
        num_realizations,
        base: ScenarioConfig {
            bs_directivity_exponent: 2.0,
            ris_directivity_exponent: 2.0,
            ..Default::default()
        },
        output: Some(PathBuf::from("rotation_range.csv")),
        seed_base: 0,
        solver: AoConfig::default(),
    }
}

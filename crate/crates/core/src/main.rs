use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use isac_rotate::ao::AoConfig;
use isac_rotate::channel::{sample_scenario, ScenarioConfig};
use isac_rotate::checks;
use isac_rotate::harness::{
    default_experiments, rotation_range_experiment, run_experiment, summarize, write_rows, ArchitectureSpec,
    ExperimentSpec, OutputFormat,
};
use isac_rotate::Error;

#[derive(Parser)]
#[command(name = "isac-rotate", version, about = "Rotation-aware ISAC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file (JSON) and write one row per solve.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the experiment's output path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated architecture labels, replacing the experiment's list.
        #[arg(long, value_delimiter = ',')]
        arch: Option<Vec<String>>,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Solve one scenario and print the solution state as JSON.
    Solve {
        /// Scenario configuration (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "Rot-BS+Rot-RIS")]
        arch: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient, MM-bound and solver-certificate suites.
    Check {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the predefined experiment files into a directory.
    SweepDefaults {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        realizations: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(Error::io(path, e).to_string()))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(Error::json(path, e).to_string()))
}

fn run(
    config: &Path,
    out: Option<PathBuf>,
    jobs: usize,
    arch: Option<Vec<String>>,
    format: &str,
) -> Result<(), Failure> {
    let format: OutputFormat = format.parse()?;
    let mut spec: ExperimentSpec = read_json(config)?;
    if let Some(list) = arch {
        spec.architectures = list.iter().map(|a| a.parse()).collect::<Result<_, _>>()?;
    }
    spec.validate()?;
    let out = out
        .or_else(|| spec.output.clone())
        .ok_or_else(|| Failure::Usage("no output path: pass --out or set \"output\" in the experiment file".into()))?;
    let t0 = Instant::now();
    let rows = run_experiment(&spec, jobs)?;
    write_rows(&rows, &out, format)?;
    log::info!("{} rows in {:.1} s -> {}", rows.len(), t0.elapsed().as_secs_f64(), out.display());
    println!("{:>12}  {:<24} {:>5} {:>10} {:>10} {:>9}", spec.sweep_variable, "architecture", "n", "rate", "se", "feasible");
    for s in summarize(&rows) {
        println!(
            "{:>12}  {:<24} {:>5} {:>10.4} {:>10.4} {:>9.3}",
            s.sweep_value, s.architecture, s.count, s.sum_rate.mean, s.sum_rate.std_error, s.feasible_fraction
        );
    }
    Ok(())
}

fn solve(config: Option<PathBuf>, seed: u64, arch: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg: ScenarioConfig = match &config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    let arch: ArchitectureSpec = arch.parse()?;
    let scenario = sample_scenario(&cfg, seed)?;
    let state = arch.solve(&scenario, &AoConfig::default())?;
    let text = serde_json::to_string_pretty(&state).map_err(|e| Failure::Runtime(e.to_string()))?;
    match out {
        Some(p) => fs::write(&p, text + "\n").map_err(|e| Failure::Runtime(Error::io(&p, e).to_string()))?,
        None => println!("{text}"),
    }
    if !state.feasible {
        log::warn!("solution misses the MSE threshold: {:.4e}", state.mse);
    }
    Ok(())
}

fn check(seed: u64) -> Result<(), Failure> {
    let mut failed = 0;
    for c in checks::run_all(seed) {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Failure::Check);
    }
    Ok(())
}

fn sweep_defaults(out: &Path, realizations: usize) -> Result<(), Failure> {
    if realizations == 0 {
        return Err(Failure::Usage("--realizations must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(Error::io(out, e).to_string()))?;
    let mut specs = default_experiments(realizations);
    specs.push(("rotation_range".into(), rotation_range_experiment(realizations)));
    for (name, spec) in specs {
        let path = out.join(format!("{name}.json"));
        spec.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ISAC_ROTATE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            arch,
            format,
        } => run(&config, out, jobs, arch, &format),
        Command::Solve { config, seed, arch, out } => solve(config, seed, &arch, out),
        Command::Check { seed } => check(seed),
        Command::SweepDefaults { out, realizations } => sweep_defaults(&out, realizations),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}

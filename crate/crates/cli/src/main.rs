//! `magloc`: simulate scenarios, learn maps, localize, calibrate and bound
//! displacement estimates from the command line.
//!
//! Exit status is 0 on success, 2 for invalid input or configuration and 3
//! when an estimator fails while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use magloc::harness::{
    compute_metrics, learn_map_from_logs, read_csv, run_scenario, simulate, CrlbConfig, EstimateRow, Scenario,
    Technique, TruthRow,
};
use magloc::sensors::{ellipsoid_calibrate, ellipsoid_calibrate_with_norm, read_samples_csv};
use magloc::{ArrayGeometry, BasisSpec, MapPosterior};

#[derive(Parser)]
#[command(name = "magloc", version, about = "Localization from spatial magnetic-field variations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write truth.csv, measurements.csv and reference.csv.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a map from a trajectory log and the readings taken along it; writes map.json.
    LearnMap {
        /// Truth-format CSV with the pose of every reading time.
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        /// Basis JSON.
        #[arg(long)]
        basis: PathBuf,
        /// Reading noise standard deviation, T.
        #[arg(long)]
        noise_std: f64,
        /// Array geometry JSON for multi-sensor readings.
        #[arg(long)]
        array: Option<PathBuf>,
        /// Prior weight standard deviation for non-spectral bases.
        #[arg(long, default_value_t = 1e-4)]
        prior_std: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario's estimator; writes the simulation logs, estimate.csv and metrics.json.
    Localize {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// map_match, slam or dead_reckon; overrides the scenario.
        #[arg(long)]
        technique: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an ellipsoid calibration to raw vector readings; writes calibration.json.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        /// Known field magnitude, T; fixes the calibration scale.
        #[arg(long)]
        field_norm: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Displacement Cramér-Rao bound for an array configuration; writes crlb.json.
    Crlb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimate log with a truth log; writes metrics.json.
    Metrics {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<magloc::Error>() {
        Some(inner) if !inner.is_validation() => 3,
        _ => 2,
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut s = Scenario::load(path).with_context(|| format!("reading scenario {}", path.display()))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn load_map(s: &Scenario) -> Result<Option<MapPosterior>> {
    match &s.map {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading map {}", p.display()))?;
            Ok(Some(MapPosterior::from_json(&text)?))
        }
        None => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = serde_json::from_str(&text).map_err(magloc::Error::from)?;
    Ok(value)
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(magloc::Error::from)?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { scenario, seed, out } => {
            let s = load_scenario(&scenario, seed)?;
            let map = load_map(&s)?;
            simulate(&s, map.as_ref())?.write_to(&out)?;
        }
        Command::LearnMap { trajectory, measurements, basis, noise_std, array, prior_std, out } => {
            let spec: BasisSpec = read_json(&basis)?;
            let geom: Option<ArrayGeometry> = array.as_deref().map(read_json).transpose()?;
            let truth: Vec<TruthRow> = read_csv(open(&trajectory)?)?;
            let samples = read_samples_csv(open(&measurements)?)?;
            let map = learn_map_from_logs(&spec, &truth, &samples, geom.as_ref(), noise_std, prior_std)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("map.json"), map.to_json()? + "\n")?;
        }
        Command::Localize { scenario, seed, technique, out } => {
            let mut s = load_scenario(&scenario, seed)?;
            if let Some(t) = technique {
                s.estimator.technique = t.parse::<Technique>()?;
                s.validate()?;
            }
            let run = run_scenario(&s)?;
            fs::create_dir_all(&out)?;
            run.write_to(&out)?;
        }
        Command::Calibrate { input, field_norm, out } => {
            let samples = read_samples_csv(open(&input)?)?;
            let cal = match field_norm {
                Some(n) => ellipsoid_calibrate_with_norm(&samples, n)?,
                None => ellipsoid_calibrate(&samples)?,
            };
            write_json(&out, "calibration.json", &cal)?;
        }
        Command::Crlb { config, out } => {
            let cfg: CrlbConfig = read_json(&config)?;
            write_json(&out, "crlb.json", &cfg.evaluate()?)?;
        }
        Command::Metrics { truth, estimate, out } => {
            let truth: Vec<TruthRow> = read_csv(open(&truth)?)?;
            let estimate: Vec<EstimateRow> = read_csv(open(&estimate)?)?;
            write_json(&out, "metrics.json", &compute_metrics(&truth, &estimate)?)?;
        }
    }
    Ok(())
}

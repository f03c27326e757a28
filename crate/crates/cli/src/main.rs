//! `attrib`: probabilities of causation for an observed change.
//!
//! ```text
//! attrib simulate --output-dir data
//! attrib attribute --manifest data/manifest.json --forcing ANT --output-dir out
//! attrib scan --manifest data/manifest.json --forcing ANT --factors 1,1.5,2,2.4,3
//! attrib spectrum --manifest data/manifest.json --forcing ANT --k 10
//! attrib decompose --manifest data/manifest.json --forcing ANT
//! ```
//!
//! Exit status is 0 on success, 1 for invalid input or options, 2 for a
//! numerical failure. Errors are reported as a single line on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attribution_core::causal::{attribute, fit_worlds, AttributeOptions, CausalReport, Criterion, IndexAttribution};
use attribution_core::dataset::{load_dataset, write_dataset, Dataset};
use attribution_core::output::{write_curves, write_json, write_scan, write_spectrum};
use attribution_core::sensitivity::{compare_projection_fitted, eigen_signal_spectrum, scan_mode, ScanMode};
use attribution_core::synth::{generate_dataset, null_dataset, TruthSpec};
use attribution_core::{Error, Stage};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const DEFAULT_SAMPLES: usize = 200_000;
const DEFAULT_SEED: u64 = 42;
const DEFAULT_FACTORS: &str = "1,1.5,2,2.4,3";
const DEFAULT_RANK: usize = 10;

#[derive(Parser)]
#[command(name = "attrib", version, about = "Probabilities of causation from model ensembles")]
struct Cli {
    /// Directory receiving output files; created if missing.
    #[arg(long, global = true, env = "ATTRIB_OUTPUT_DIR", default_value = ".")]
    output_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attribute the observation to one forcing.
    Attribute(AttributeArgs),
    /// PNS as the covariances are inflated or their correlations rescaled.
    Scan(ScanArgs),
    /// Eigen-expansion of the optimal index and a truncated-projection comparison.
    Spectrum(SpectrumArgs),
    /// Write a synthetic dataset with known truth.
    Simulate(SimulateArgs),
    /// Variance shares of the fitted factual covariance.
    Decompose(InputArgs),
}

#[derive(Args, Serialize)]
struct InputArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Forcing whose causal role is assessed.
    #[arg(long)]
    forcing: String,
}

#[derive(Args, Serialize)]
struct SamplingArgs {
    /// Monte Carlo draws per world.
    #[arg(long, short = 'N', default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Threshold criterion: pns or pn.
    #[arg(long, default_value_t = Criterion::Pns)]
    criterion: Criterion,
}

impl SamplingArgs {
    fn options(&self) -> AttributeOptions {
        AttributeOptions {
            samples: self.samples,
            seed: self.seed,
            criterion: self.criterion,
        }
    }
}

#[derive(Args, Serialize)]
struct AttributeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args, Serialize)]
struct ScanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    sampling: SamplingArgs,
    /// Comma-separated factors; 1 is always included.
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_FACTORS)]
    factors: Vec<f64>,
    /// inflation (scale both covariances) or correlation (rescale off-diagonal correlations).
    #[arg(long, default_value = "inflation")]
    mode: ScanMode,
}

#[derive(Args, Serialize)]
struct SpectrumArgs {
    #[command(flatten)]
    #[serde(flatten)]
    input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    sampling: SamplingArgs,
    /// Leading internal-variability modes kept by the projected index
    /// [default: min(10, n)].
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Truth specification (JSON); the bundled 6x9 scenario when omitted.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Overrides the seed of the truth specification.
    #[arg(long)]
    seed: Option<u64>,
    /// Zero this forcing's response, giving a dataset where it has no effect.
    #[arg(long = "null")]
    null_forcing: Option<String>,
}

enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

fn echo<T: Serialize>(command: &str, args: &T) -> serde_json::Value {
    serde_json::json!({ "command": command, "args": args })
}

fn load(input: &InputArgs) -> Result<Dataset, Failure> {
    load_dataset(&input.manifest).map_err(|e| Failure::from(Error::from(e)))
}

fn output_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Invalid(format!("cannot create output directory {}: {e}", dir.display())))
}

fn describe(name: &str, a: &IndexAttribution) -> String {
    let t = &a.threshold;
    format!(
        "{name}: PNS {:.6} ({}), PN {}, PS {}, u* {:.6}, z_obs {:.6}",
        t.pns,
        a.language.term,
        t.pn.map_or("undefined".into(), |v| format!("{v:.6}")),
        t.ps.map_or("undefined".into(), |v| format!("{v:.6}")),
        t.u_star,
        t.z_obs,
    )
}

fn run_attribute(out: &Path, a: &AttributeArgs) -> Result<(), Failure> {
    let d = load(&a.input)?;
    let mut report: CausalReport = attribute(&d, &a.input.forcing, &a.sampling.options())?;
    report.config = Some(echo("attribute", a));

    output_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("model.json"), &report.model)?;
    write_curves(&out.join("curves.csv"), &report.total.curves)?;
    for (file, part) in [
        ("curves_global_mean.csv", &report.global_mean),
        ("curves_pattern_residual.csv", &report.pattern_residual),
    ] {
        match part {
            Some(p) => write_curves(&out.join(file), &p.curves)?,
            None => log::warn!("{file} not written: that part of the index vanishes"),
        }
    }

    println!("{}", describe("total", &report.total));
    if let Some(g) = &report.global_mean {
        println!("{}", describe("global mean", g));
    }
    if let Some(p) = &report.pattern_residual {
        println!("{}", describe("pattern residual", p));
    }
    Ok(())
}

fn run_scan(out: &Path, a: &ScanArgs) -> Result<(), Failure> {
    let d = load(&a.input)?;
    let scan = scan_mode(&d, &a.input.forcing, &a.factors, a.mode, &a.sampling.options())
        .map_err(Error::at(Stage::Scan))?;
    output_dir(out)?;
    let file = match a.mode {
        ScanMode::Inflation => "inflation.csv",
        ScanMode::Correlation => "correlation.csv",
    };
    write_scan(&out.join(file), &scan)?;
    for (k, p) in scan.factors.iter().zip(&scan.pns_total) {
        println!("factor {k}: PNS {p:.6}");
    }
    match scan.crossing(0.95) {
        Some(k) => println!("PNS falls below 0.95 at factor {k:.3}"),
        None => println!("PNS stays at or above 0.95 over the scanned factors"),
    }
    Ok(())
}

fn run_spectrum(out: &Path, a: &SpectrumArgs) -> Result<(), Failure> {
    let d = load(&a.input)?;
    let w = fit_worlds(&d, &a.input.forcing)?;
    let spectrum = eigen_signal_spectrum(&w.factual, &w.counterfactual)
        .map_err(|e| Error::at(Stage::Spectrum)(e.into()))?;
    let k = a.k.unwrap_or(DEFAULT_RANK.min(d.n()));
    let cmp = compare_projection_fitted(&w, k, &d.y, &a.sampling.options())?;

    output_dir(out)?;
    write_spectrum(&out.join("eigen.csv"), &spectrum.rows)?;
    write_json(
        &out.join("projection.json"),
        &serde_json::json!({ "config": echo("spectrum", a), "comparison": cmp }),
    )?;
    println!("{}", describe("optimal", &cmp.optimal));
    println!("{}", describe(&format!("projected (k = {k})"), &cmp.projected));
    Ok(())
}

fn run_simulate(out: &Path, a: &SimulateArgs) -> Result<(), Failure> {
    let mut truth = match &a.truth {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<TruthSpec>(&text)
                .map_err(|e| Failure::Invalid(format!("malformed {}: {e}", path.display())))?
        }
        None => TruthSpec::bundled_scenario(a.seed.unwrap_or(DEFAULT_SEED)),
    };
    if let Some(seed) = a.seed {
        truth.seed = seed;
    }
    let d = match &a.null_forcing {
        Some(f) => null_dataset(&truth, f),
        None => generate_dataset(&truth),
    }
    .map_err(Error::from)?;
    let manifest = write_dataset(out, &d).map_err(Error::from)?;
    write_json(&out.join("truth.json"), &truth)?;
    println!("{}", manifest.display());
    Ok(())
}

fn run_decompose(out: &Path, a: &InputArgs) -> Result<(), Failure> {
    let d = load(a)?;
    let w = fit_worlds(&d, &a.forcing)?;
    let shares = w.decomposition();
    output_dir(out)?;
    write_json(
        &out.join("decomposition.json"),
        &serde_json::json!({
            "config": echo("decompose", a),
            "forcing": a.forcing,
            "shares": shares,
            "total": shares.total(),
            "variance": w.params,
            "a_hat": w.inputs.prior.a_hat,
            "nu_hat": w.inputs.prior.nu_hat,
        }),
    )?;
    println!(
        "internal variability {:.4}, model error {:.4}, observational {:.4}, sampling {:.4}",
        shares.internal_variability, shares.model_error, shares.observational, shares.sampling
    );
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprintln!("error: missing subcommand (see attrib --help)");
                    ExitCode::from(1)
                }
                _ => {
                    let text = e.render().to_string();
                    eprintln!("{}", one_line(text.lines().next().unwrap_or("invalid arguments")));
                    ExitCode::from(1)
                }
            };
        }
    };

    let out = cli.output_dir.as_path();
    let result = match &cli.command {
        Command::Attribute(a) => run_attribute(out, a),
        Command::Scan(a) => run_scan(out, a),
        Command::Spectrum(a) => run_spectrum(out, a),
        Command::Simulate(a) => run_simulate(out, a),
        Command::Decompose(a) => run_decompose(out, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {}", one_line(&msg));
            ExitCode::from(2)
        }
    }
}

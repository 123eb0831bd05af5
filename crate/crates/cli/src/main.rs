//! `hbm`: analyze, spectrum, certify, flow and ineq drivers over body-spec files.

mod commands;
mod error;
mod output;
mod spec_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hbm_core::EllMode;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "hbm", version, about = "Centro-affine spectral checks for smooth symmetric convex bodies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validity, volume, curvature range and pinching constants.
    Analyze(Common),
    /// Galerkin spectrum with Bochner and local Brunn-Minkowski self-checks.
    Spectrum(Common),
    /// Uniqueness certificates for each exponent.
    Certify(Common),
    /// Self-similar flow from several initial bodies.
    Flow(FlowArgs),
    /// L^p Minkowski inequality against other bodies.
    Ineq(IneqArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Body-spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Grid resolution: nodes on the circle, latitudes on S^2.
    #[arg(long)]
    resolution: Option<usize>,
    /// Harmonic basis degree L.
    #[arg(long)]
    degree: Option<usize>,
    /// Linear normalization used for pinching.
    #[arg(long, default_value = "identity", value_parser = parse_ell_mode)]
    ell_mode: EllMode,
    /// A single exponent p.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "p_list")]
    p: Option<f64>,
    /// Comma-separated exponents.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    p_list: Vec<f64>,
    /// Tolerance: self-check tolerance, spectral margin for certify, agreement for flow.
    #[arg(long)]
    tol: Option<f64>,
    /// Seed for randomized test functions and bodies.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of randomized functions or bodies.
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory.
    #[arg(long, env = "HBM_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct FlowArgs {
    #[command(flatten)]
    common: Common,
    /// Initial body-spec files; seeded random bodies when absent.
    #[arg(long = "initial")]
    initials: Vec<PathBuf>,
    /// Allow flows on S^2 (slow).
    #[arg(long)]
    allow_3d: bool,
}

#[derive(Debug, Clone, Args)]
struct IneqArgs {
    #[command(flatten)]
    common: Common,
    /// Comparison body-spec files; seeded random bodies when absent.
    #[arg(long = "other")]
    others: Vec<PathBuf>,
}

fn parse_ell_mode(s: &str) -> Result<EllMode, String> {
    s.parse::<EllMode>().map_err(|e| e.to_string())
}

/// Resolved run configuration, echoed into every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub spec: PathBuf,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub others: Vec<PathBuf>,
    pub resolution: usize,
    pub degree: usize,
    pub ell_mode: EllMode,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub p_list: Vec<f64>,
    pub tol: f64,
    pub seed: u64,
    pub samples: usize,
    pub out: PathBuf,
    pub allow_3d: bool,
}

struct Defaults {
    resolution: [usize; 2],
    degree: [usize; 2],
    tol: f64,
    samples: usize,
}

fn defaults(command: &str) -> Defaults {
    match command {
        "flow" => Defaults { resolution: [128, 32], degree: [16, 8], tol: 5e-4, samples: 2 },
        "certify" => Defaults { resolution: [256, 48], degree: [32, 16], tol: hbm_core::certify::DEFAULT_SPECTRAL_MARGIN, samples: 0 },
        "ineq" => Defaults { resolution: [256, 48], degree: [32, 16], tol: 1e-6, samples: 10 },
        _ => Defaults { resolution: [256, 48], degree: [32, 16], tol: 1e-6, samples: 20 },
    }
}

fn resolve(command: &str, c: &Common, others: Vec<PathBuf>, allow_3d: bool) -> Result<(RunConfig, hbm_core::BodySpec), CliError> {
    let spec = spec_file::load(&c.spec)?;
    let d = defaults(command);
    let slot = match spec.dim {
        2 => 0,
        3 => 1,
        n => return Err(CliError::Input(format!("{}: dimension {n} is not supported (use 2 or 3)", c.spec.display()))),
    };
    let tol = c.tol.unwrap_or(d.tol);
    if !(tol.is_finite() && tol > 0.0) {
        return Err(CliError::Input(format!("--tol must be positive, got {tol}")));
    }
    let mut p_list = c.p_list.clone();
    if let Some(p) = c.p {
        p_list = vec![p];
    }
    Ok((
        RunConfig {
            command: command.to_string(),
            spec: c.spec.clone(),
            others,
            resolution: c.resolution.unwrap_or(d.resolution[slot]),
            degree: c.degree.unwrap_or(d.degree[slot]),
            ell_mode: c.ell_mode,
            p_list,
            tol,
            seed: c.seed,
            samples: c.samples.unwrap_or(d.samples),
            out: c.out.clone(),
            allow_3d,
        },
        spec,
    ))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(c) => {
            let (cfg, spec) = resolve("analyze", &c, vec![], false)?;
            commands::analyze(&cfg, &spec)
        }
        Command::Spectrum(c) => {
            let (cfg, spec) = resolve("spectrum", &c, vec![], false)?;
            commands::spectrum(&cfg, &spec)
        }
        Command::Certify(c) => {
            let (cfg, spec) = resolve("certify", &c, vec![], false)?;
            commands::certify(&cfg, &spec)
        }
        Command::Flow(f) => {
            let (cfg, spec) = resolve("flow", &f.common, f.initials, f.allow_3d)?;
            commands::flow(&cfg, &spec)
        }
        Command::Ineq(i) => {
            let (cfg, spec) = resolve("ineq", &i.common, i.others, false)?;
            commands::ineq(&cfg, &spec)
        }
    }
}

fn main() -> ExitCode {
    // usage errors are input errors, not clap's default status 2
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hbm: {e}");
            e.exit_code()
        }
    }
}

//! Report and CSV writers.

use std::fs;
use std::path::{Path, PathBuf};

use hbm_core::{BodySpec, SphereGrid};
use serde::Serialize;

use crate::error::CliError;
use crate::RunConfig;

#[derive(Debug, Serialize)]
pub struct GridInfo {
    pub dim: usize,
    pub resolution: usize,
    pub degree: usize,
    pub nodes: usize,
}

impl GridInfo {
    pub fn of(grid: &SphereGrid, resolution: usize) -> Self {
        Self { dim: grid.dim(), resolution, degree: grid.degree(), nodes: grid.len() }
    }
}

/// Fields shared by every report.
#[derive(Debug, Serialize)]
pub struct Header<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub non_rigorous: bool,
    pub disclaimer: &'a str,
    pub config: &'a RunConfig,
    pub grid: GridInfo,
    pub body: BodyInfo<'a>,
}

#[derive(Debug, Serialize)]
pub struct BodyInfo<'a> {
    pub label: String,
    pub spec: &'a BodySpec,
}

impl<'a> Header<'a> {
    pub fn new(config: &'a RunConfig, spec: &'a BodySpec, grid: &SphereGrid) -> Self {
        Self {
            command: &config.command,
            version: env!("CARGO_PKG_VERSION"),
            non_rigorous: true,
            disclaimer: hbm_core::certify::DISCLAIMER,
            config,
            grid: GridInfo::of(grid, config.resolution),
            body: BodyInfo { label: spec.label(), spec },
        }
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    #[serde(flatten)]
    header: &'a Header<'a>,
    #[serde(flatten)]
    payload: &'a T,
}

fn stem(config: &RunConfig) -> String {
    config.spec.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "body".into())
}

pub fn path_for(config: &RunConfig, suffix: &str) -> PathBuf {
    config.out.join(format!("{}-{suffix}", stem(config)))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn write_report<T: Serialize>(config: &RunConfig, header: &Header, payload: &T) -> Result<PathBuf, CliError> {
    ensure_dir(&config.out)?;
    let text = toml::to_string(&Report { header, payload })
        .map_err(|e| CliError::Invariant(format!("report serialization failed: {e}")))?;
    let path = path_for(config, &format!("{}.toml", config.command));
    fs::write(&path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

pub fn write_csv<T: Serialize>(config: &RunConfig, suffix: &str, rows: &[T]) -> Result<PathBuf, CliError> {
    ensure_dir(&config.out)?;
    let path = path_for(config, suffix);
    let csv_err = |e: csv::Error| CliError::Input(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

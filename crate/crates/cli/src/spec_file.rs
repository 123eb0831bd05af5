//! Body-spec files.
//!
//! ```toml
//! dim = 2
//! family = "ellipsoid"
//! ell = [[1.0, 0.3], [0.0, 1.0]]   # optional
//!
//! [params]
//! axes = [1.0, 2.0]
//! ```

use std::path::Path;

use hbm_core::body::Family;
use hbm_core::BodySpec;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    dim: usize,
    family: String,
    #[serde(default)]
    params: toml::Table,
    ell: Option<Vec<Vec<f64>>>,
}

const FAMILIES: [&str; 4] = ["ball", "ellipsoid", "lp-ball", "harmonic-perturbation"];

pub fn parse(text: &str, origin: &str) -> Result<BodySpec, CliError> {
    let file: SpecFile =
        toml::from_str(text).map_err(|e| CliError::Input(format!("{origin}: {}", e.to_string().trim_end())))?;
    if !FAMILIES.contains(&file.family.as_str()) {
        return Err(CliError::Input(format!(
            "{origin}: field `family`: unknown family \"{}\", expected one of {}",
            file.family,
            FAMILIES.join(", ")
        )));
    }
    let mut table = file.params;
    if table.contains_key("kind") {
        return Err(CliError::Input(format!("{origin}: field `params.kind` is not allowed, use `family`")));
    }
    table.insert("kind".into(), toml::Value::String(file.family.clone()));
    let family = Family::deserialize(toml::Value::Table(table)).map_err(|e| {
        CliError::Input(format!("{origin}: field `params` of family \"{}\": {}", file.family, e.to_string().trim_end()))
    })?;
    let spec = BodySpec { dim: file.dim, family, ell: file.ell };
    spec.validate().map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    Ok(spec)
}

pub fn load(path: &Path) -> Result<BodySpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read spec {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

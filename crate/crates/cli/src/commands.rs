use std::sync::Arc;

use hbm_core::body::{self, ValidityReport};
use hbm_core::certify::{self, improved_bound_curve, minkowski_inequality, Certificate};
use hbm_core::flow::{self, Consistency, ExperimentReport, FlowConfig};
use hbm_core::geometry::{frame, pinching, CentroAffineFrame, FrameDiagnostics};
use hbm_core::spectral::{self, bochner_check, local_bm_check, spectrum as solve_spectrum, ParityFilter};
use hbm_core::sphere::random_band_limited;
use hbm_core::{BodySpec, Parity, PinchingReport, SphereGrid};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;
use crate::output::{write_csv, write_report, Header};
use crate::{spec_file, RunConfig};

fn grid_for(config: &RunConfig, spec: &BodySpec) -> Result<Arc<SphereGrid>, CliError> {
    Ok(SphereGrid::new(spec.dim, config.resolution)?.shared())
}

fn frame_for(spec: &BodySpec, grid: &Arc<SphereGrid>) -> Result<CentroAffineFrame, CliError> {
    Ok(frame(&body::sample_valid(spec, grid)?)?)
}

fn require_p(config: &RunConfig) -> Result<(), CliError> {
    if config.p_list.is_empty() {
        return Err(CliError::Input(format!("{} needs --p or --p-list", config.command)));
    }
    Ok(())
}

#[derive(Serialize)]
struct Range {
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct AnalyzePayload {
    validity: ValidityReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failures: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    volume: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    curvature: Option<Range>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pinching: Option<PinchingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<FrameDiagnostics>,
}

pub fn analyze(config: &RunConfig, spec: &BodySpec) -> Result<(), CliError> {
    let grid = grid_for(config, spec)?;
    let field = body::sample(spec, &grid)?;
    let validity = body::validate(&field);
    let header = Header::new(config, spec, &grid);
    if !validity.pass {
        let mut failures = Vec::new();
        if validity.min_h <= 0.0 {
            failures.push(format!("support function not positive (min h = {:.3e})", validity.min_h));
        }
        if validity.min_eigenvalue <= 0.0 {
            failures.push(format!("D2h not positive-definite (min eigenvalue {:.3e})", validity.min_eigenvalue));
        }
        if validity.evenness_defect > 1e-12 {
            failures.push(format!("body not origin-symmetric (defect {:.3e})", validity.evenness_defect));
        }
        let msg = failures.join("; ");
        let payload = AnalyzePayload { validity, failures, volume: None, curvature: None, pinching: None, frame: None };
        write_report(config, &header, &payload)?;
        return Err(CliError::Input(format!("{}: validation failed: {msg}", spec.label())));
    }
    let fr = frame(&field)?;
    let pin = pinching(&fr, config.ell_mode)?;
    let kappa = fr.inv_kappa.values.iter().map(|v| 1.0 / v);
    let curvature = kappa.fold(Range { min: f64::INFINITY, max: f64::NEG_INFINITY }, |r, k| Range {
        min: r.min.min(k),
        max: r.max.max(k),
    });
    if let Some(w) = &pin.warning {
        eprintln!("warning: {w}");
    }
    let payload = AnalyzePayload {
        validity,
        failures: vec![],
        volume: Some(field.volume()),
        curvature: Some(curvature),
        pinching: Some(pin),
        frame: Some(fr.diagnostics),
    };
    write_report(config, &header, &payload)?;
    Ok(())
}

#[derive(Serialize)]
struct EigenRow {
    index: usize,
    value: f64,
    parity: String,
    residual: f64,
    converged: bool,
}

#[derive(Serialize)]
struct BochnerSummary {
    functions: usize,
    degree: usize,
    max_relative_gap: f64,
    pass: bool,
}

#[derive(Serialize)]
struct LocalBmSummary {
    functions: usize,
    degree: usize,
    min_quotient: f64,
    min_margin: f64,
    equality_defect: f64,
    pass: bool,
}

#[derive(Serialize)]
struct SpectrumPayload {
    lambda1: f64,
    lambda1_multiplicity: usize,
    lambda1_cluster_diameter: f64,
    lambda1_even: Option<f64>,
    converged: bool,
    refinement_change: Option<f64>,
    eigenvalue_count: usize,
    max_residual: f64,
    parity_leak: f64,
    eigenvalues_csv: String,
    bochner: BochnerSummary,
    local_bm: LocalBmSummary,
}

fn file_name(path: &std::path::Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn spectrum(config: &RunConfig, spec: &BodySpec) -> Result<(), CliError> {
    let grid = grid_for(config, spec)?;
    let fr = frame_for(spec, &grid)?;
    let (system, result) = solve_spectrum(&fr, config.degree, ParityFilter::All)?;
    let rows: Vec<EigenRow> = result
        .pairs
        .iter()
        .enumerate()
        .map(|(index, p)| EigenRow {
            index,
            value: p.value,
            parity: p.parity.to_string(),
            residual: p.residual,
            converged: p.converged,
        })
        .collect();
    let csv_path = write_csv(config, "eigenvalues.csv", &rows)?;

    let n = spec.dim as f64;
    let tol = config.tol;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let test_degree = config.degree.min(8);
    let basis = grid.harmonic_basis(test_degree)?;
    let mut max_gap: f64 = 0.0;
    for _ in 0..config.samples {
        let f = random_band_limited(&grid, &basis, Some(Parity::Even), true, &mut rng);
        max_gap = max_gap.max(bochner_check(&fr, &f)?.relative_gap);
    }
    let mut min_quotient = f64::INFINITY;
    for _ in 0..config.samples {
        let f = random_band_limited(&grid, &basis, None, true, &mut rng);
        min_quotient = min_quotient.min(local_bm_check(&fr, &f)?.quotient);
    }
    let mut equality_defect: f64 = 0.0;
    for i in 0..spec.dim {
        let v = DVector::from_fn(spec.dim, |j, _| if i == j { 1.0 } else { 0.0 });
        let f = spectral::linear_conormal_function(&fr, &v);
        equality_defect = equality_defect.max(local_bm_check(&fr, &f)?.margin.abs());
    }
    let bochner = BochnerSummary { functions: config.samples, degree: test_degree, max_relative_gap: max_gap, pass: max_gap <= tol };
    let bm_pass = (config.samples == 0 || min_quotient >= n - 1.0 - tol) && equality_defect <= tol;
    let local_bm = LocalBmSummary {
        functions: config.samples,
        degree: test_degree,
        min_quotient,
        min_margin: min_quotient - (n - 1.0),
        equality_defect,
        pass: bm_pass,
    };
    let checks_pass = bochner.pass && local_bm.pass;
    let payload = SpectrumPayload {
        lambda1: result.lambda1,
        lambda1_multiplicity: result.lambda1_multiplicity,
        lambda1_cluster_diameter: result.lambda1_cluster_diameter,
        lambda1_even: result.lambda1_even,
        converged: result.converged,
        refinement_change: result.refinement_change,
        eigenvalue_count: result.pairs.len(),
        max_residual: result.max_residual(),
        parity_leak: system.parity_leak(),
        eigenvalues_csv: file_name(&csv_path),
        bochner,
        local_bm,
    };
    write_report(config, &Header::new(config, spec, &grid), &payload)?;
    if !checks_pass {
        return Err(CliError::Invariant(format!(
            "self-check failed: Bochner gap {max_gap:.3e}, local Brunn-Minkowski margin {:.3e}, equality defect {equality_defect:.3e} (tolerance {tol:.1e})",
            min_quotient - (n - 1.0)
        )));
    }
    if !result.converged {
        return Err(CliError::Numerical(not_converged(config, &grid, &result)));
    }
    Ok(())
}

fn not_converged(config: &RunConfig, grid: &SphereGrid, result: &spectral::SpectralResult) -> String {
    let needed = 2 * (config.degree + spectral::REFINEMENT_STEP);
    match result.refinement_change {
        None => format!(
            "spectrum not checked for convergence: degree {} needs a grid of degree {needed}, grid has {}; increase --resolution or lower --degree",
            config.degree,
            grid.degree()
        ),
        Some(change) => format!(
            "spectrum not converged (change {change:.3e} under refinement); increase --degree and --resolution"
        ),
    }
}

#[derive(Serialize)]
struct CertEntry {
    p: f64,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<Certificate>,
}

#[derive(Serialize)]
struct BoundPoint {
    sigma: f64,
    bound: f64,
}

#[derive(Serialize)]
struct SpectrumBrief {
    degree: usize,
    lambda1_even: Option<f64>,
    converged: bool,
    refinement_change: Option<f64>,
}

#[derive(Serialize)]
struct CertifyPayload {
    pinching: PinchingReport,
    spectrum: SpectrumBrief,
    certificates: Vec<CertEntry>,
    bound_curve: Vec<BoundPoint>,
}

pub fn certify(config: &RunConfig, spec: &BodySpec) -> Result<(), CliError> {
    require_p(config)?;
    let grid = grid_for(config, spec)?;
    let fr = frame_for(spec, &grid)?;
    let pin = pinching(&fr, config.ell_mode)?;
    let (_, sp) = solve_spectrum(&fr, config.degree, ParityFilter::Even)?;
    let label = spec.label();
    let mut rejected = Vec::new();
    let certificates = config
        .p_list
        .iter()
        .map(|&p| match certify::certify(&label, &pin, &sp, p, config.tol) {
            Ok(c) => CertEntry { p, status: c.status.to_string(), reason: None, certificate: Some(c) },
            Err(e) => {
                rejected.push(p);
                CertEntry { p, status: "rejected".into(), reason: Some(e.to_string()), certificate: None }
            }
        })
        .collect();
    let bound_curve = improved_bound_curve(spec.dim, 50)?
        .into_iter()
        .map(|(sigma, bound)| BoundPoint { sigma, bound })
        .collect();
    let payload = CertifyPayload {
        pinching: pin,
        spectrum: SpectrumBrief {
            degree: config.degree,
            lambda1_even: sp.lambda1_even,
            converged: sp.converged,
            refinement_change: sp.refinement_change,
        },
        certificates,
        bound_curve,
    };
    write_report(config, &Header::new(config, spec, &grid), &payload)?;
    if !rejected.is_empty() {
        return Err(CliError::Input(format!("exponents outside (-{}, 1) rejected: {rejected:?}", spec.dim)));
    }
    Ok(())
}

/// Seeded symmetric test body near the ball: a rotated ellipsoid or a
/// perturbed ball.
fn random_body(dim: usize, rng: &mut ChaCha8Rng) -> BodySpec {
    if rng.random_bool(0.5) {
        let axes: Vec<f64> = (0..dim).map(|_| rng.random_range(0.7..1.5)).collect();
        let q = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        BodySpec::ellipsoid(&axes).mapped(&q)
    } else {
        BodySpec::perturbed_ball(
            dim,
            rng.random_range(0.7..1.5),
            &[(2, rng.random_range(-0.05..0.05)), (4, rng.random_range(-0.01..0.01))],
        )
    }
}

fn bodies(config: &RunConfig, spec: &BodySpec, rng: &mut ChaCha8Rng) -> Result<Vec<BodySpec>, CliError> {
    if config.others.is_empty() {
        return Ok((0..config.samples).map(|_| random_body(spec.dim, rng)).collect());
    }
    config
        .others
        .iter()
        .map(|p| {
            let s = spec_file::load(p)?;
            if s.dim != spec.dim {
                return Err(CliError::Input(format!("{}: dimension {} differs from {}", p.display(), s.dim, spec.dim)));
            }
            Ok(s)
        })
        .collect()
}

#[derive(Serialize)]
struct FlowPayload {
    experiment: ExperimentReport,
    series: Vec<String>,
}

pub fn flow(config: &RunConfig, spec: &BodySpec) -> Result<(), CliError> {
    if config.p_list.len() != 1 {
        return Err(CliError::Input("flow needs exactly one exponent (--p)".into()));
    }
    if spec.dim == 3 && !config.allow_3d {
        return Err(CliError::Input("flows on S^2 are slow; pass --allow-3d to run them".into()));
    }
    let p = config.p_list[0];
    let grid = grid_for(config, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initials = bodies(config, spec, &mut rng)?;
    if initials.is_empty() {
        return Err(CliError::Input("flow needs at least one initial body".into()));
    }
    let flow_config = FlowConfig { allow_three_dim: config.allow_3d, ..FlowConfig::default() };
    let report = flow::uniqueness_experiment(spec, p, &initials, &grid, &flow_config, config.degree, config.tol)?;
    let mut series = Vec::new();
    for (i, run) in report.runs.iter().enumerate() {
        if !run.records.is_empty() {
            series.push(file_name(&write_csv(config, &format!("flow-run{i}.csv"), &run.records)?));
        }
    }
    let consistency = report.consistency;
    let note = report.note.clone().unwrap_or_default();
    write_report(config, &Header::new(config, spec, &grid), &FlowPayload { experiment: report, series })?;
    match consistency {
        Consistency::Consistent | Consistency::NoClaim => Ok(()),
        Consistency::Incomplete => Err(CliError::Numerical(format!("some flows did not converge {note}"))),
        Consistency::Inconsistent => Err(CliError::Invariant(format!("certified body but the flow limits differ {note}"))),
        Consistency::Refused => Err(CliError::Input(format!("exponent p = {p} refused {note}"))),
    }
}

#[derive(Serialize)]
struct IneqRow {
    other: String,
    p: f64,
    lhs: f64,
    rhs: f64,
    gap: f64,
    volume_k: f64,
    volume_l: f64,
    certificate: String,
    coherent: bool,
}

#[derive(Serialize)]
struct IneqPayload {
    others: Vec<BodySpec>,
    min_gap: f64,
    rows_csv: String,
    rows: Vec<IneqRow>,
}

pub fn ineq(config: &RunConfig, spec: &BodySpec) -> Result<(), CliError> {
    require_p(config)?;
    let n = spec.dim as f64;
    if let Some(p) = config.p_list.iter().find(|p| !(p.is_finite() && **p > -n && **p <= 1.0)) {
        return Err(CliError::Input(format!("p = {p} lies outside (-{n}, 1]")));
    }
    let grid = grid_for(config, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let others = bodies(config, spec, &mut rng)?;
    let field_k = body::sample_valid(spec, &grid)?;
    let fr = frame(&field_k)?;
    let pin = pinching(&fr, config.ell_mode)?;
    let (_, sp) = solve_spectrum(&fr, config.degree, ParityFilter::Even)?;
    let label = spec.label();
    let statuses: Vec<String> = config
        .p_list
        .iter()
        .map(|&p| {
            if p < 1.0 {
                certify::certify(&label, &pin, &sp, p, certify::DEFAULT_SPECTRAL_MARGIN).map(|c| c.status.to_string())
            } else {
                Ok("not-applicable".into())
            }
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for other in &others {
        let field_l = body::sample_valid(other, &grid)?;
        for (&p, status) in config.p_list.iter().zip(&statuses) {
            let r = minkowski_inequality(&field_k, &field_l, p)?;
            let certified = status.starts_with("certified");
            rows.push(IneqRow {
                other: other.label(),
                p,
                lhs: r.lhs,
                rhs: r.rhs,
                gap: r.gap,
                volume_k: r.volume_k,
                volume_l: r.volume_l,
                certificate: status.clone(),
                coherent: !(certified && r.gap < -config.tol),
            });
        }
    }
    let csv_path = write_csv(config, "ineq.csv", &rows)?;
    let min_gap = rows.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    let incoherent = rows.iter().filter(|r| !r.coherent).count();
    let payload = IneqPayload { others, min_gap, rows_csv: file_name(&csv_path), rows };
    write_report(config, &Header::new(config, spec, &grid), &payload)?;
    if incoherent > 0 {
        return Err(CliError::Invariant(format!(
            "{incoherent} certified pairs violate the inequality beyond {:.1e}",
            config.tol
        )));
    }
    Ok(())
}

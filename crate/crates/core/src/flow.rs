//! Volume-normalized anisotropic power-of-Gauss-curvature flow in support
//! function form, `dh/dt = -(rho_K kappa_L)^alpha` with `alpha = 1 / (1 - p)`,
//! used to locate self-similar solutions of `S_p L = c S_p K`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::body::{self, BodySpec, SupportField};
use crate::certify::{self, CertificateStatus};
use crate::error::{Error, Result};
use crate::geometry::{self, measure_density, EllMode};
use crate::spectral::{self, ParityFilter};
use crate::sphere::{ScalarField, SphereGrid};

/// Step-size and stopping parameters.
#[derive(Debug, Clone, Serialize)]
pub struct FlowConfig {
    /// Fraction of the explicit stability limit used per step.
    pub cfl: f64,
    /// Stop once `max |dh/dt| / max h` falls below this.
    pub rate_tolerance: f64,
    pub max_steps: usize,
    pub max_time: f64,
    /// Halvings of `dt` allowed when a step loses convexity.
    pub retry_budget: usize,
    /// Volume held fixed; `None` uses `V(K)`.
    pub target_volume: Option<f64>,
    /// Record a time-series row every this many steps.
    pub record_every: usize,
    /// Three-dimensional runs are opt-in.
    pub allow_three_dim: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            cfl: 0.7,
            rate_tolerance: 1e-8,
            max_steps: 400_000,
            max_time: 60.0,
            retry_budget: 12,
            target_volume: None,
            record_every: 200,
            allow_three_dim: false,
        }
    }
}

/// Current flowing body and the fixed data.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub field: SupportField,
    /// `rho_K = h_K^{1-p} / kappa_K`.
    pub rho: ScalarField,
    pub p: f64,
    pub alpha: f64,
    pub time: f64,
    pub steps: usize,
    pub volume: f64,
    pub target_volume: f64,
    pub residual: f64,
    /// Initial data was even; updates are projected onto even functions.
    pub even: bool,
}

impl FlowState {
    pub fn new(k: &SupportField, l0: &SupportField, p: f64, target_volume: Option<f64>) -> Result<Self> {
        let n = k.dim() as f64;
        if !p.is_finite() || p >= 1.0 || p <= -n {
            return Err(Error::InvalidArgument(format!("p = {p} lies outside (-{n}, 1)")));
        }
        k.grid.check(&l0.h)?;
        for (name, f) in [("anisotropy body", k), ("initial body", l0)] {
            let r = body::validate(f);
            if !r.pass {
                return Err(Error::InvalidBody(format!("{name}: min eig D2h = {:.3e}", r.min_eigenvalue)));
            }
        }
        let rho = measure_density(k, p);
        let target = target_volume.unwrap_or_else(|| k.volume());
        if !(target > 0.0) {
            return Err(Error::InvalidArgument("target volume must be positive".into()));
        }
        let grid = &l0.grid;
        let even = (0..grid.len()).all(|a| l0.h.values[a] == l0.h.values[grid.antipode(a)]);
        let v0 = l0.volume();
        let mut field = l0.scaled((target / v0).powf(1.0 / n));
        field.spec = l0.spec.clone();
        let residual = selfsim_residual(&field, k, p)?.residual;
        Ok(Self { field, rho, p, alpha: 1.0 / (1.0 - p), time: 0.0, steps: 0, volume: target, target_volume: target, residual, even })
    }

    fn speed(&self) -> Vec<f64> {
        self.field
            .d2h
            .iter()
            .zip(&self.rho.values)
            .map(|(m, r)| (r / m.determinant()).powf(self.alpha))
            .collect()
    }

    /// Explicit stability bound from the linearized diffusion coefficient
    /// `alpha * speed * lambda_max(D2h^{-1})` and the spectral stiffness.
    pub fn stable_dt(&self, cfl: f64) -> f64 {
        let grid = &self.field.grid;
        let kmax = (grid.degree() + 1) as f64;
        let stiffness = if grid.dim() == 2 { kmax * kmax } else { kmax * (kmax + 1.0) };
        let speed = self.speed();
        let dmax = self
            .field
            .d2h
            .iter()
            .zip(&speed)
            .map(|(m, s)| self.alpha * s / m.clone().symmetric_eigen().eigenvalues.min())
            .fold(0.0_f64, f64::max);
        cfl * 2.0 / (dmax * stiffness)
    }
}

/// One explicit step followed by rescaling to the target volume.
pub fn step(state: &FlowState, dt: f64) -> Result<FlowState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let grid = state.field.grid.clone();
    let speed = state.speed();
    let raw: Vec<f64> = state.field.h.values.iter().zip(&speed).map(|(h, s)| h - dt * s).collect();
    // Components the differentiation cannot see (the Nyquist mode on S^1)
    // would be amplified by the rescaling; keep only the band-limited part.
    let mut values = grid.differentiate_values(&raw).values;
    if state.even {
        let sym: Vec<f64> = (0..values.len()).map(|a| 0.5 * (values[a] + values[grid.antipode(a)])).collect();
        values = sym;
    }
    let h = ScalarField::new(&grid, values)?;
    let field = SupportField::from_values(grid.clone(), h)?;
    let report = body::validate(&field);
    if !report.pass {
        return Err(Error::Flow(format!(
            "convexity lost at t = {:.6} with dt = {dt:.3e} (min eig D2h = {:.3e})",
            state.time, report.min_eigenvalue
        )));
    }
    let n = grid.dim() as f64;
    let v = field.volume();
    let mut field = field.scaled((state.target_volume / v).powf(1.0 / n));
    field.spec = None;
    let volume = field.volume();
    Ok(FlowState {
        field,
        rho: state.rho.clone(),
        p: state.p,
        alpha: state.alpha,
        time: state.time + dt,
        steps: state.steps + 1,
        volume,
        target_volume: state.target_volume,
        residual: state.residual,
        even: state.even,
    })
}

/// Self-similarity fit of `S_p L` against `S_p K`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SelfSimilarity {
    pub c: f64,
    pub residual: f64,
}

/// `c` minimizing `|| h_L^{1-p}/kappa_L - c rho_K ||` in `L^2(m)` and the
/// relative distance at that `c`.
pub fn selfsim_residual(l: &SupportField, k: &SupportField, p: f64) -> Result<SelfSimilarity> {
    let grid = &k.grid;
    grid.check(&l.h)?;
    let dl = measure_density(l, p);
    let dk = measure_density(k, p);
    let ip = |a: &ScalarField, b: &ScalarField| {
        grid.integrate_values(&a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect::<Vec<_>>())
    };
    let kk = ip(&dk, &dk);
    let c = ip(&dl, &dk) / kk;
    let diff = dl.zip_with(&dk, |x, y| x - c * y)?;
    let ll = ip(&dl, &dl);
    let residual = if ll > 0.0 { (ip(&diff, &diff) / ll).max(0.0).sqrt() } else { 0.0 };
    Ok(SelfSimilarity { c, residual })
}

/// One time-series row.
#[derive(Debug, Clone, Serialize)]
pub struct FlowRecord {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub volume: f64,
    pub residual: f64,
    /// `max |dh/dt| / max h` over the last recorded interval.
    pub rate: f64,
    pub min_h: f64,
    pub max_h: f64,
}

#[derive(Debug, Clone)]
pub struct FlowRun {
    pub state: FlowState,
    pub converged: bool,
    pub records: Vec<FlowRecord>,
    pub retries: usize,
    pub message: Option<String>,
}

fn record(state: &FlowState, dt: f64, rate: f64) -> FlowRecord {
    let h = &state.field.h.values;
    FlowRecord {
        step: state.steps,
        time: state.time,
        dt,
        volume: state.volume,
        residual: state.residual,
        rate,
        min_h: h.iter().copied().fold(f64::INFINITY, f64::min),
        max_h: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Run the flow until the rate and residual settle or the budget runs out.
pub fn run(k: &SupportField, l0: &SupportField, p: f64, config: &FlowConfig) -> Result<FlowRun> {
    if k.dim() == 3 && !config.allow_three_dim {
        return Err(Error::InvalidArgument("three-dimensional flows must be enabled explicitly".into()));
    }
    let mut state = FlowState::new(k, l0, p, config.target_volume)?;
    let mut records = vec![record(&state, 0.0, f64::NAN)];
    let mut retries = 0;
    let mut checkpoint = (state.time, state.field.h.values.clone(), state.residual);
    let mut last_dt = 0.0;
    while state.steps < config.max_steps && state.time < config.max_time {
        let mut dt = state.stable_dt(config.cfl);
        let mut attempt = 0;
        let next = loop {
            match step(&state, dt) {
                Ok(s) => break s,
                Err(Error::Flow(msg)) | Err(Error::UnderResolved { context: msg, .. }) => {
                    attempt += 1;
                    retries += 1;
                    if attempt > config.retry_budget {
                        return Ok(FlowRun {
                            state,
                            converged: false,
                            records,
                            retries,
                            message: Some(format!("aborted after {attempt} step halvings: {msg}")),
                        });
                    }
                    dt *= 0.5;
                }
                Err(e) => return Err(e),
            }
        };
        state = next;
        last_dt = dt;
        if state.steps % config.record_every == 0 {
            state.residual = selfsim_residual(&state.field, k, p)?.residual;
            let elapsed = state.time - checkpoint.0;
            let hmax = state.field.h.max_abs();
            let change = state
                .field
                .h
                .values
                .iter()
                .zip(&checkpoint.1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            let rate = change / (elapsed * hmax);
            records.push(record(&state, dt, rate));
            let plateau = (state.residual - checkpoint.2).abs() <= 1e-3 * checkpoint.2.max(1e-12);
            checkpoint = (state.time, state.field.h.values.clone(), state.residual);
            if rate < config.rate_tolerance && plateau {
                return Ok(FlowRun { state, converged: true, records, retries, message: None });
            }
        }
    }
    state.residual = selfsim_residual(&state.field, k, p)?.residual;
    records.push(record(&state, last_dt, f64::NAN));
    Ok(FlowRun { state, converged: false, records, retries, message: Some("step or time budget exhausted".into()) })
}

/// Outcome of one flow within an experiment.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub initial: String,
    pub converged: bool,
    pub steps: usize,
    pub time: f64,
    pub residual: f64,
    pub c: f64,
    pub message: Option<String>,
    #[serde(skip)]
    pub limit: Vec<f64>,
    #[serde(skip)]
    pub records: Vec<FlowRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Consistency {
    /// Certified and all limits agree.
    Consistent,
    /// Certified but the limits differ.
    Inconsistent,
    /// Not certified; distinct limits are allowed.
    NoClaim,
    /// Some run failed to converge.
    Incomplete,
    /// Exponent in the known non-uniqueness regime.
    Refused,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub body: String,
    pub p: f64,
    pub runs: Vec<RunSummary>,
    /// `(i, j, sup |h_i - h_j|)` between converged limits.
    pub pairwise_distances: Vec<(usize, usize, f64)>,
    pub max_distance: f64,
    pub certificate: Option<CertificateStatus>,
    pub consistency: Consistency,
    pub note: Option<String>,
}

/// Flow from each initial body and compare the limits.
#[allow(clippy::too_many_arguments)]
pub fn uniqueness_experiment(
    k: &BodySpec,
    p: f64,
    initials: &[BodySpec],
    grid: &Arc<SphereGrid>,
    config: &FlowConfig,
    degree: usize,
    agreement: f64,
) -> Result<ExperimentReport> {
    let n = k.dim as f64;
    if !p.is_finite() || p >= 1.0 {
        return Err(Error::InvalidArgument(format!("p = {p} must be below 1")));
    }
    if p <= -n {
        return Ok(ExperimentReport {
            body: k.label(),
            p,
            runs: Vec::new(),
            pairwise_distances: Vec::new(),
            max_distance: f64::NAN,
            certificate: None,
            consistency: Consistency::Refused,
            note: Some(format!("p <= -n = {}: uniqueness is known to fail (ellipsoids); no verdict", -n)),
        });
    }
    for s in std::iter::once(k).chain(initials) {
        if s.dim != k.dim {
            return Err(Error::InvalidArgument("all bodies must share the dimension".into()));
        }
        if !s.is_symmetric_family() {
            return Err(Error::InvalidBody(format!("{} is not origin-symmetric", s.label())));
        }
    }
    let kf = body::sample_valid(k, grid)?;
    let fields = initials.iter().map(|s| body::sample_valid(s, grid)).collect::<Result<Vec<_>>>()?;

    let fr = geometry::frame(&kf)?;
    let pin = geometry::pinching(&fr, EllMode::AxisScaling)?;
    let (_, spec) = spectral::spectrum(&fr, degree, ParityFilter::Even)?;
    let cert = certify::certify(&k.label(), &pin, &spec, p, certify::DEFAULT_SPECTRAL_MARGIN)?;

    let runs: Vec<RunSummary> = fields
        .par_iter()
        .zip(initials)
        .map(|(l0, s)| {
            let out = run(&kf, l0, p, config)?;
            let ss = selfsim_residual(&out.state.field, &kf, p)?;
            Ok(RunSummary {
                initial: s.label(),
                converged: out.converged,
                steps: out.state.steps,
                time: out.state.time,
                residual: ss.residual,
                c: ss.c,
                message: out.message,
                limit: out.state.field.h.values.clone(),
                records: out.records,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pairwise = Vec::new();
    let mut max_distance: f64 = 0.0;
    let done: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].converged).collect();
    for (x, &i) in done.iter().enumerate() {
        for &j in &done[x + 1..] {
            let d = runs[i].limit.iter().zip(&runs[j].limit).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
            max_distance = max_distance.max(d);
            pairwise.push((i, j, d));
        }
    }
    let all_converged = runs.iter().all(|r| r.converged);
    let consistency = if !all_converged {
        Consistency::Incomplete
    } else if !cert.status.is_certified() {
        Consistency::NoClaim
    } else if max_distance <= agreement {
        Consistency::Consistent
    } else {
        Consistency::Inconsistent
    };
    Ok(ExperimentReport {
        body: k.label(),
        p,
        runs,
        pairwise_distances: pairwise,
        max_distance,
        certificate: Some(cert.status),
        consistency,
        note: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::sample;

    fn grid(res: usize) -> Arc<SphereGrid> {
        SphereGrid::new(2, res).unwrap().shared()
    }

    #[test]
    fn ball_is_a_fixed_point() {
        let g = grid(64);
        let b = sample(&BodySpec::ball(2, 1.0), &g).unwrap();
        let s = FlowState::new(&b, &b, 0.0, None).unwrap();
        let next = step(&s, 1e-3).unwrap();
        for v in &next.field.h.values {
            assert!((v - 1.0).abs() < 1e-10);
        }
        assert!((next.volume - s.volume).abs() < 1e-8 * s.volume);
    }

    #[test]
    fn selfsim_examples() {
        let g = grid(128);
        let k = sample(&BodySpec::ellipsoid(&[1.0, 2.0]), &g).unwrap();
        let r = selfsim_residual(&k, &k, 0.3).unwrap();
        assert!((r.c - 1.0).abs() < 1e-12 && r.residual < 1e-7);
        let r = selfsim_residual(&k.scaled(2.0), &k, 0.0).unwrap();
        assert!((r.c - 4.0).abs() < 1e-10 && r.residual < 1e-7);
        let l = sample(&BodySpec::perturbed_ball(2, 1.0, &[(2, 0.05)]), &g).unwrap();
        let a = selfsim_residual(&l, &k, 0.4).unwrap();
        let b = selfsim_residual(&l.scaled(1.7), &k, 0.4).unwrap();
        assert!((a.residual - b.residual).abs() < 1e-10);
        assert!((b.c / a.c - 1.7f64.powf(2.0 - 0.4)).abs() < 1e-10);
    }

    #[test]
    fn even_data_stays_even() {
        let g = grid(64);
        let k = sample(&BodySpec::ball(2, 1.0), &g).unwrap();
        let l = sample(&BodySpec::perturbed_ball(2, 1.0, &[(2, 0.05), (4, 0.01)]), &g).unwrap();
        let mut s = FlowState::new(&k, &l, 0.0, None).unwrap();
        for _ in 0..20 {
            let dt = s.stable_dt(0.4);
            s = step(&s, dt).unwrap();
        }
        for a in 0..g.len() {
            assert_eq!(s.field.h.values[a], s.field.h.values[g.antipode(a)]);
        }
        assert!((s.volume - std::f64::consts::PI).abs() < 1e-8);
    }

    #[test]
    fn critical_exponent_is_refused() {
        let g = grid(64);
        let r = uniqueness_experiment(&BodySpec::ball(2, 1.0), -2.0, &[], &g, &FlowConfig::default(), 8, 5e-4).unwrap();
        assert_eq!(r.consistency, Consistency::Refused);
        assert!(FlowState::new(
            &sample(&BodySpec::ball(2, 1.0), &g).unwrap(),
            &sample(&BodySpec::ball(2, 1.0), &g).unwrap(),
            -2.0,
            None
        )
        .is_err());
    }
}

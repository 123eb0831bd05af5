//! Uniqueness certificates for the even L^p-Minkowski problem, the
//! certificate polynomial and its optimized right-root bound, and evaluators
//! for the L^p and logarithmic Minkowski inequalities.

use serde::Serialize;

use crate::body::SupportField;
use crate::error::{Error, Result};
use crate::geometry::{measure_density, EllMode, PinchingReport};
use crate::spectral::SpectralResult;

/// Default margin required of the spectral route.
pub const DEFAULT_SPECTRAL_MARGIN: f64 = 1e-3;

/// Bounds of the tau search.
pub const TAU_MIN: f64 = 0.5;
pub const TAU_MAX: f64 = 6.0;
const TAU_TOL: f64 = 1e-8;
const TAU_SAMPLES: usize = 1101;

pub const DISCLAIMER: &str =
    "numerical, non-rigorous: pinching constants and eigenvalues are estimated from grid samples";

/// `1 - (n + 1) / gamma`.
pub fn p_gamma(n: usize, gamma: f64) -> Result<f64> {
    if gamma.is_nan() || gamma < 1.0 {
        return Err(Error::InvalidArgument(format!("pinching ratio must be >= 1, got {gamma}")));
    }
    Ok(1.0 - (n as f64 + 1.0) / gamma)
}

/// `P_{sigma,tau}(t) = t^2 - (n + 1 + (n-1) sigma - (tau-2)^2) t + (n-1) tau^2 (1 - sigma)`.
pub fn cert_poly(n: usize, sigma: f64, tau: f64, t: f64) -> f64 {
    let nf = n as f64;
    let b = nf + 1.0 + (nf - 1.0) * sigma - (tau - 2.0) * (tau - 2.0);
    let c = (nf - 1.0) * tau * tau * (1.0 - sigma);
    t * t - b * t + c
}

/// Larger root of `P_{sigma,tau}`, or `None` when the roots are complex.
pub fn right_root(n: usize, sigma: f64, tau: f64) -> Option<f64> {
    let nf = n as f64;
    let b = nf + 1.0 + (nf - 1.0) * sigma - (tau - 2.0) * (tau - 2.0);
    let c = (nf - 1.0) * tau * tau * (1.0 - sigma);
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // avoid cancellation when b < 0
    Some(if b >= 0.0 { 0.5 * (b + sq) } else { 2.0 * c / (sq - b) })
}

/// Right root if `tau` qualifies, i.e. `P_{sigma,tau}(n - 1) < 0`.
fn qualified_root(n: usize, sigma: f64, tau: f64) -> Option<f64> {
    if cert_poly(n, sigma, tau, n as f64 - 1.0) < 0.0 {
        right_root(n, sigma, tau)
    } else {
        None
    }
}

/// Maximizer and value of `sup_tau R_{sigma,tau}` over qualifying `tau` in
/// `[TAU_MIN, TAU_MAX]`.
pub fn improved_lower_bound_with_tau(n: usize, sigma: f64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::UnsupportedDimension(n));
    }
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::InvalidArgument(format!("sigma must lie in (0, 1], got {sigma}")));
    }
    let score = |tau: f64| qualified_root(n, sigma, tau).unwrap_or(f64::NEG_INFINITY);
    let h = (TAU_MAX - TAU_MIN) / (TAU_SAMPLES - 1) as f64;
    // tau = sigma + 1 always qualifies; start from it
    let mut best_tau = sigma + 1.0;
    let mut best = score(best_tau);
    for i in 0..TAU_SAMPLES {
        let tau = TAU_MIN + h * i as f64;
        let v = score(tau);
        if v > best {
            best = v;
            best_tau = tau;
        }
    }
    // golden-section refinement on the bracket around the best sample
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = ((best_tau - h).max(TAU_MIN), (best_tau + h).min(TAU_MAX));
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (score(c), score(d));
    while b - a > TAU_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = score(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = score(d);
        }
    }
    for tau in [a, b, 0.5 * (a + b)] {
        let v = score(tau);
        if v > best {
            best = v;
            best_tau = tau;
        }
    }
    Ok((best_tau, best))
}

/// `sup_{tau} R_{sigma,tau}`: a lower bound for the even spectral gap of a
/// body whose anisotropic metric is pinched with `alpha / beta = sigma`.
pub fn improved_lower_bound(n: usize, sigma: f64) -> Result<f64> {
    improved_lower_bound_with_tau(n, sigma).map(|(_, v)| v)
}

/// Samples of `sigma -> sup_tau R_{sigma,tau}` on `(0, 1]`.
pub fn improved_bound_curve(n: usize, samples: usize) -> Result<Vec<(f64, f64)>> {
    (1..=samples)
        .map(|i| {
            let sigma = i as f64 / samples as f64;
            improved_lower_bound(n, sigma).map(|v| (sigma, v))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateStatus {
    CertifiedByPinching,
    CertifiedBySpectrum,
    NotCertified,
}

impl CertificateStatus {
    pub fn is_certified(self) -> bool {
        self != CertificateStatus::NotCertified
    }
}

impl std::fmt::Display for CertificateStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CertificateStatus::CertifiedByPinching => "certified-by-pinching",
            CertificateStatus::CertifiedBySpectrum => "certified-by-spectrum",
            CertificateStatus::NotCertified => "not-certified",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PinchingEvidence {
    pub mode: EllMode,
    pub gamma: f64,
    pub p_gamma: f64,
    pub fallback: bool,
    pub passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralEvidence {
    pub lambda1_even: f64,
    /// `n - p`
    pub threshold: f64,
    pub margin: f64,
    pub required_margin: f64,
    pub converged: bool,
    /// `sup_tau R_{sigma,tau}` at `sigma = alpha / beta`
    pub improved_bound: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub body: String,
    pub dim: usize,
    pub p: f64,
    pub status: CertificateStatus,
    pub pinching: PinchingEvidence,
    pub spectral: SpectralEvidence,
    pub note: Option<String>,
    pub non_rigorous: bool,
    pub disclaimer: String,
}

/// Verdict for exponent `p` from pinching and even-spectrum evidence of one body.
///
/// `p = -n` is accepted and never certified; other exponents outside
/// `(-n, 1)` are rejected.
pub fn certify(
    body: &str,
    pinching: &PinchingReport,
    spectrum: &SpectralResult,
    p: f64,
    margin: f64,
) -> Result<Certificate> {
    let n = spectrum.dim;
    let nf = n as f64;
    if !p.is_finite() || p < -nf || p >= 1.0 {
        return Err(Error::InvalidArgument(format!("p = {p} lies outside (-{n}, 1)")));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("spectral margin must be positive, got {margin}")));
    }
    let lambda = spectrum.lambda1_even.ok_or_else(|| {
        Error::InvalidArgument("spectral result carries no even eigenvalue".into())
    })?;
    let critical = p == -nf;
    let threshold = nf - p;
    let spec_margin = lambda - threshold;
    let sigma = (1.0 / pinching.gamma).clamp(f64::MIN_POSITIVE, 1.0);
    let pinching_passes = !critical && p >= pinching.p_gamma;
    let spectral_passes = !critical && spectrum.converged && spec_margin > margin;
    let status = if pinching_passes {
        CertificateStatus::CertifiedByPinching
    } else if spectral_passes {
        CertificateStatus::CertifiedBySpectrum
    } else {
        CertificateStatus::NotCertified
    };
    let note = if critical {
        Some("critical exponent p = -n: uniqueness fails for ellipsoids, no verdict".into())
    } else if !spectrum.converged {
        Some("even spectral gap not converged under refinement; spectral route disabled".into())
    } else {
        None
    };
    Ok(Certificate {
        body: body.to_string(),
        dim: n,
        p,
        status,
        pinching: PinchingEvidence {
            mode: pinching.mode,
            gamma: pinching.gamma,
            p_gamma: pinching.p_gamma,
            fallback: pinching.fallback,
            passes: pinching_passes,
        },
        spectral: SpectralEvidence {
            lambda1_even: lambda,
            threshold,
            margin: spec_margin,
            required_margin: margin,
            converged: spectrum.converged,
            improved_bound: improved_lower_bound(n, sigma)?,
            passes: spectral_passes,
        },
        note,
        non_rigorous: true,
        disclaimer: DISCLAIMER.to_string(),
    })
}

/// Both sides of the L^p Minkowski inequality (`p != 0`) or its logarithmic
/// form (`p = 0`); `gap = lhs - rhs` is non-negative when the inequality holds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InequalityReport {
    pub p: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub volume_k: f64,
    pub volume_l: f64,
}

pub fn minkowski_inequality(k: &SupportField, l: &SupportField, p: f64) -> Result<InequalityReport> {
    let grid = &k.grid;
    grid.check(&l.h)?;
    let n = k.dim() as f64;
    if !p.is_finite() || p <= -n || p > 1.0 {
        return Err(Error::InvalidArgument(format!("p = {p} lies outside (-{n}, 1]")));
    }
    if k.h.values.iter().chain(&l.h.values).any(|&v| v <= 0.0) {
        return Err(Error::InvalidBody("support function must be positive".into()));
    }
    let vk = k.volume();
    let vl = l.volume();
    let (lhs, rhs) = if p == 0.0 {
        let cone = measure_density(k, 0.0);
        let integrand: Vec<f64> = cone
            .values
            .iter()
            .zip(k.h.values.iter().zip(&l.h.values))
            .map(|(c, (hk, hl))| c / n * (hl / hk).ln())
            .collect();
        (grid.integrate_values(&integrand) / vk, (vl / vk).ln() / n)
    } else {
        let dens = measure_density(k, p);
        let integrand: Vec<f64> = dens.values.iter().zip(&l.h.values).map(|(d, hl)| hl.powf(p) * d).collect();
        (
            grid.integrate_values(&integrand) / p,
            n / p * vk.powf(1.0 - p / n) * vl.powf(p / n),
        )
    };
    Ok(InequalityReport { p, lhs, rhs, gap: lhs - rhs, volume_k: vk, volume_l: vl })
}

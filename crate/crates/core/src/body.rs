//! Analytic families of smooth origin-symmetric convex bodies, described by
//! their support function and Minkowski gauge.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{real_harmonic, ScalarField, SphereGrid};

/// Default weight of the Euclidean term that keeps ℓ_q balls strictly convex.
pub const DEFAULT_LP_BLEND: f64 = 0.5;

/// One even harmonic mode of a perturbed ball.
///
/// On the circle the mode is `cos(degree * phi)` (`sin` for negative order).
/// On S^2 it is the real harmonic of the given degree and order scaled so the
/// zonal one equals the Legendre polynomial `P_l(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicMode {
    pub degree: usize,
    #[serde(default)]
    pub order: i64,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Family {
    Ball {
        radius: f64,
    },
    Ellipsoid {
        axes: Vec<f64>,
    },
    /// Unit ball of `sqrt((|x|_q^2 + blend |x|_2^2) / (1 + blend)) / scale`.
    /// `blend = 0` is the plain ℓ_q ball, whose curvature degenerates on the
    /// coordinate axes.
    LpBall {
        exponent: f64,
        #[serde(default = "unit")]
        scale: f64,
        #[serde(default = "default_blend")]
        blend: f64,
    },
    HarmonicPerturbation {
        radius: f64,
        modes: Vec<HarmonicMode>,
    },
}

fn unit() -> f64 {
    1.0
}

fn default_blend() -> f64 {
    DEFAULT_LP_BLEND
}

/// Declarative description of a body `ell * K` with `K` from a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub dim: usize,
    pub family: Family,
    /// Row-major linear map applied to the body.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<Vec<Vec<f64>>>,
}

impl BodySpec {
    pub fn ball(dim: usize, radius: f64) -> Self {
        Self { dim, family: Family::Ball { radius }, ell: None }
    }

    pub fn ellipsoid(axes: &[f64]) -> Self {
        Self { dim: axes.len(), family: Family::Ellipsoid { axes: axes.to_vec() }, ell: None }
    }

    pub fn lp_ball(dim: usize, exponent: f64, scale: f64, blend: f64) -> Self {
        Self { dim, family: Family::LpBall { exponent, scale, blend }, ell: None }
    }

    /// Perturbed ball from `(degree, coefficient)` pairs (order 0).
    pub fn perturbed_ball(dim: usize, radius: f64, modes: &[(usize, f64)]) -> Self {
        let modes =
            modes.iter().map(|&(degree, coefficient)| HarmonicMode { degree, order: 0, coefficient }).collect();
        Self { dim, family: Family::HarmonicPerturbation { radius, modes }, ell: None }
    }

    /// The body `map * self`.
    pub fn mapped(&self, map: &DMatrix<f64>) -> Self {
        let combined = match self.ell_matrix() {
            Some(old) => map * old,
            None => map.clone(),
        };
        let rows = (0..self.dim).map(|i| (0..self.dim).map(|j| combined[(i, j)]).collect()).collect();
        Self { ell: Some(rows), ..self.clone() }
    }

    pub fn ell_matrix(&self) -> Option<DMatrix<f64>> {
        self.ell.as_ref().map(|rows| {
            DMatrix::from_fn(self.dim, self.dim, |i, j| rows.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::InvalidSpec { field: field.into(), reason });
        if self.dim < 2 {
            return bad("dim", format!("dimension {} is below 2", self.dim));
        }
        let positive = |field: &str, v: f64| -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, format!("must be a positive number, got {v}"));
            }
            Ok(())
        };
        match &self.family {
            Family::Ball { radius } => positive("params.radius", *radius)?,
            Family::Ellipsoid { axes } => {
                if axes.len() != self.dim {
                    return bad("params.axes", format!("expected {} semi-axes, got {}", self.dim, axes.len()));
                }
                for a in axes {
                    positive("params.axes", *a)?;
                }
            }
            Family::LpBall { exponent, scale, blend } => {
                if !(exponent.is_finite() && *exponent > 2.0) {
                    return bad("params.exponent", format!("must exceed 2, got {exponent}"));
                }
                positive("params.scale", *scale)?;
                if !(blend.is_finite() && *blend >= 0.0) {
                    return bad("params.blend", format!("must be non-negative, got {blend}"));
                }
            }
            Family::HarmonicPerturbation { radius, modes } => {
                positive("params.radius", *radius)?;
                for mode in modes {
                    if mode.degree % 2 != 0 {
                        return bad("params.modes", format!("degree {} is odd; only even modes keep the body symmetric", mode.degree));
                    }
                    if self.dim == 3 && mode.order.unsigned_abs() as usize > mode.degree {
                        return bad("params.modes", format!("order {} exceeds degree {}", mode.order, mode.degree));
                    }
                    if !mode.coefficient.is_finite() {
                        return bad("params.modes", "coefficient is not finite".into());
                    }
                }
            }
        }
        if let Some(rows) = &self.ell {
            if rows.len() != self.dim || rows.iter().any(|r| r.len() != self.dim) {
                return bad("ell", format!("must be a {0}x{0} matrix", self.dim));
            }
            let m = self.ell_matrix().unwrap();
            let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            let det = m.determinant();
            if !det.is_finite() || det.abs() <= 1e-10 * scale.powi(self.dim as i32) {
                return bad("ell", format!("matrix is singular (det = {det:.3e})"));
            }
        }
        Ok(())
    }

    fn check_vector(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::InvalidArgument(format!("vector has length {}, body dimension is {}", x.len(), self.dim)));
        }
        Ok(())
    }

    /// Support function at any vector (positively 1-homogeneous).
    pub fn support(&self, x: &DVector<f64>) -> Result<f64> {
        self.validate()?;
        self.check_vector(x)?;
        Ok(match self.ell_matrix() {
            Some(m) => self.family_support(&(m.transpose() * x)),
            None => self.family_support(x),
        })
    }

    /// Minkowski gauge `inf { t >= 0 : x in t K }`.
    pub fn gauge(&self, x: &DVector<f64>) -> Result<f64> {
        self.validate()?;
        self.check_vector(x)?;
        if x.norm() == 0.0 {
            return Err(Error::InvalidArgument("gauge is undefined at the origin".into()));
        }
        Ok(match self.ell_matrix() {
            Some(m) => {
                let y = m.lu().solve(x).ok_or_else(|| Error::InvalidSpec { field: "ell".into(), reason: "singular".into() })?;
                self.family_gauge(&y)
            }
            None => self.family_gauge(x),
        })
    }

    fn family_support(&self, x: &DVector<f64>) -> f64 {
        let r = x.norm();
        if r == 0.0 {
            return 0.0;
        }
        match &self.family {
            Family::Ball { radius } => radius * r,
            Family::Ellipsoid { axes } => axes.iter().zip(x.iter()).map(|(a, xi)| a * a * xi * xi).sum::<f64>().sqrt(),
            Family::LpBall { exponent, scale, blend } => lp_support(x, *exponent, *scale, *blend),
            Family::HarmonicPerturbation { radius, modes } => {
                let theta = x / r;
                r * (radius + modes.iter().map(|m| m.coefficient * mode_value(self.dim, m, &theta)).sum::<f64>())
            }
        }
    }

    fn family_gauge(&self, x: &DVector<f64>) -> f64 {
        match &self.family {
            Family::Ball { radius } => x.norm() / radius,
            Family::Ellipsoid { axes } => axes.iter().zip(x.iter()).map(|(a, xi)| xi * xi / (a * a)).sum::<f64>().sqrt(),
            Family::LpBall { exponent, scale, blend } => {
                let nq = x.iter().map(|v| v.abs().powf(*exponent)).sum::<f64>().powf(1.0 / exponent);
                ((nq * nq + blend * x.norm_squared()) / (1.0 + blend)).sqrt() / scale
            }
            Family::HarmonicPerturbation { .. } => self.gauge_by_polarity(x),
        }
    }

    /// `|x|_K = sup_theta <x, theta> / h_K(theta)`, maximized numerically.
    fn gauge_by_polarity(&self, x: &DVector<f64>) -> f64 {
        let ratio = |t: &DVector<f64>| x.dot(t) / self.family_support(t);
        if self.dim == 2 {
            let at = |p: f64| ratio(&DVector::from_vec(vec![p.cos(), p.sin()]));
            let samples = 720;
            let step = 2.0 * PI / samples as f64;
            let best = (0..samples).map(|k| k as f64 * step).fold((0.0, f64::NEG_INFINITY), |acc, p| {
                let v = at(p);
                if v > acc.1 {
                    (p, v)
                } else {
                    acc
                }
            });
            let p = golden_max(at, best.0 - step, best.0 + step, 1e-13);
            return at(p);
        }
        // n = 3: coarse search, then Newton in tangent coordinates
        let (nt, np) = (60, 120);
        let mut best = (DVector::from_vec(vec![0.0, 0.0, 1.0]), f64::NEG_INFINITY);
        for i in 0..=nt {
            let th = PI * i as f64 / nt as f64;
            for j in 0..np {
                let ph = 2.0 * PI * j as f64 / np as f64;
                let t = DVector::from_vec(vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]);
                let v = ratio(&t);
                if v > best.1 {
                    best = (t, v);
                }
            }
        }
        let mut t0 = best.0;
        for _ in 0..30 {
            let (e1, e2) = tangent_basis(&t0);
            let f = |u: f64, v: f64| {
                let t = &t0 + &e1 * u + &e2 * v;
                ratio(&(&t / t.norm()))
            };
            let hstep = 1e-4;
            let f0 = f(0.0, 0.0);
            let gu = (f(hstep, 0.0) - f(-hstep, 0.0)) / (2.0 * hstep);
            let gv = (f(0.0, hstep) - f(0.0, -hstep)) / (2.0 * hstep);
            let huu = (f(hstep, 0.0) - 2.0 * f0 + f(-hstep, 0.0)) / (hstep * hstep);
            let hvv = (f(0.0, hstep) - 2.0 * f0 + f(0.0, -hstep)) / (hstep * hstep);
            let huv = (f(hstep, hstep) - f(hstep, -hstep) - f(-hstep, hstep) + f(-hstep, -hstep)) / (4.0 * hstep * hstep);
            let det = huu * hvv - huv * huv;
            let (mut du, mut dv) = if huu < 0.0 && det > 0.0 {
                (-(hvv * gu - huv * gv) / det, -(huu * gv - huv * gu) / det)
            } else {
                (0.1 * gu, 0.1 * gv)
            };
            // backtrack on non-improving steps
            while f(du, dv) < f0 && du.hypot(dv) > 1e-14 {
                du *= 0.5;
                dv *= 0.5;
            }
            let t = &t0 + &e1 * du + &e2 * dv;
            t0 = &t / t.norm();
            if du.hypot(dv) < 1e-10 {
                break;
            }
        }
        ratio(&t0)
    }

    /// Boundary point `X_K(theta) = D h_K(theta)` by central differences.
    /// Test oracle only; the pipeline uses the spectral boundary map.
    pub fn boundary_point_fd(&self, theta: &DVector<f64>, step: f64) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.dim);
        for i in 0..self.dim {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[i] += step;
            m[i] -= step;
            g[i] = (self.support(&p)? - self.support(&m)?) / (2.0 * step);
        }
        Ok(g)
    }

    pub fn is_symmetric_family(&self) -> bool {
        match &self.family {
            Family::HarmonicPerturbation { modes, .. } => modes.iter().all(|m| m.degree % 2 == 0),
            _ => true,
        }
    }

    /// Short human-readable identifier.
    pub fn label(&self) -> String {
        let base = match &self.family {
            Family::Ball { radius } => format!("ball(r={radius})"),
            Family::Ellipsoid { axes } => {
                format!("ellipsoid({})", axes.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","))
            }
            Family::LpBall { exponent, scale, blend } => format!("lp-ball(q={exponent},scale={scale},blend={blend})"),
            Family::HarmonicPerturbation { radius, modes } => format!(
                "perturbed-ball(r={radius};{})",
                modes.iter().map(|m| format!("{}:{}:{}", m.degree, m.order, m.coefficient)).collect::<Vec<_>>().join(",")
            ),
        };
        match &self.ell {
            Some(_) => format!("ell*{base} (n={})", self.dim),
            None => format!("{base} (n={})", self.dim),
        }
    }
}

fn tangent_basis(t: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let pick = if t[0].abs() < 0.9 { DVector::from_vec(vec![1.0, 0.0, 0.0]) } else { DVector::from_vec(vec![0.0, 1.0, 0.0]) };
    let e1 = &pick - t * t.dot(&pick);
    let e1 = &e1 / e1.norm();
    let e2 = DVector::from_vec(vec![t[1] * e1[2] - t[2] * e1[1], t[2] * e1[0] - t[0] * e1[2], t[0] * e1[1] - t[1] * e1[0]]);
    (e1, e2)
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn mode_value(dim: usize, mode: &HarmonicMode, theta: &DVector<f64>) -> f64 {
    if dim == 2 {
        let phi = theta[1].atan2(theta[0]);
        let k = mode.degree as f64;
        if mode.order < 0 {
            (k * phi).sin()
        } else {
            (k * phi).cos()
        }
    } else {
        let l = mode.degree;
        real_harmonic(l, mode.order, theta) * (4.0 * PI / (2.0 * l as f64 + 1.0)).sqrt()
    }
}

/// Support function of the blended ℓ_q ball via the Legendre transform of
/// `F = gauge^2 / 2`: `h(x)^2 / 2 = sup_y <x, y> - F(y)`.
fn lp_support(x: &DVector<f64>, q: f64, scale: f64, blend: f64) -> f64 {
    if blend == 0.0 {
        let qd = q / (q - 1.0);
        return scale * x.iter().map(|v| v.abs().powf(qd)).sum::<f64>().powf(1.0 / qd);
    }
    let n = x.len();
    let c = 1.0 / (scale * scale * (1.0 + blend));
    let f_val = |y: &DVector<f64>| {
        let nq = y.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q);
        0.5 * c * (nq * nq + blend * y.norm_squared())
    };
    let objective = |y: &DVector<f64>| x.dot(y) - f_val(y);
    let mut y = x / (c * (1.0 + blend));
    for _ in 0..100 {
        let nq = y.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q);
        if nq == 0.0 {
            break;
        }
        let u = y.map(|v| v.abs().powf(q - 2.0) * v);
        let grad = (&u * nq.powf(2.0 - q) + &y * blend) * c;
        let mut hess = (&u * u.transpose()) * ((2.0 - q) * nq.powf(2.0 - 2.0 * q));
        for i in 0..n {
            hess[(i, i)] += (q - 1.0) * nq.powf(2.0 - q) * y[i].abs().powf(q - 2.0) + blend;
        }
        hess *= c;
        let resid = x - &grad;
        if resid.norm() <= 1e-15 * x.norm() {
            break;
        }
        let step = hess.cholesky().map(|ch| ch.solve(&resid)).unwrap_or_else(|| resid.clone());
        let base = objective(&y);
        let mut t = 1.0;
        let mut next = &y + &step * t;
        while objective(&next) < base - 1e-15 * base.abs() && t > 1e-8 {
            t *= 0.5;
            next = &y + &step * t;
        }
        let done = (&next - &y).norm() <= 1e-16 * y.norm();
        y = next;
        if done {
            break;
        }
    }
    (2.0 * f_val(&y)).sqrt()
}

/// Support function sampled on a grid, with its covariant derivatives.
#[derive(Debug, Clone)]
pub struct SupportField {
    pub grid: Arc<SphereGrid>,
    pub h: ScalarField,
    pub grad_h: Vec<DVector<f64>>,
    pub hess_h: Vec<DMatrix<f64>>,
    /// `hess_h + h * identity` in node frames.
    pub d2h: Vec<DMatrix<f64>>,
    pub residual: f64,
    /// Source description, when the field was sampled from one.
    pub spec: Option<BodySpec>,
}

impl SupportField {
    /// Build from raw support values; derivatives computed spectrally.
    pub fn from_values(grid: Arc<SphereGrid>, h: ScalarField) -> Result<Self> {
        let d = grid.differentiate(&h)?;
        let tdim = grid.tangent_dim();
        let d2h = d
            .hessian
            .iter()
            .zip(&h.values)
            .map(|(hess, &hv)| {
                let mut m = hess.clone();
                for i in 0..tdim {
                    m[(i, i)] += hv;
                }
                // symmetrize roundoff
                (&m + m.transpose()) * 0.5
            })
            .collect();
        Ok(Self { grid, h, grad_h: d.gradient, hess_h: d.hessian, d2h, residual: d.residual, spec: None })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Boundary point `X_K(theta) = grad h + h theta` at node `a`.
    pub fn boundary_point(&self, a: usize) -> DVector<f64> {
        self.grid.frame(a) * &self.grad_h[a] + self.grid.node(a) * self.h.values[a]
    }

    /// `det(D2h)`, the reciprocal Gauss curvature, at each node.
    pub fn inverse_curvature(&self) -> ScalarField {
        ScalarField::new(&self.grid, self.d2h.iter().map(|m| m.determinant()).collect()).expect("node count")
    }

    /// Volume from the cone-volume measure `(1/n) h det(D2h) dm`.
    pub fn volume(&self) -> f64 {
        let n = self.dim() as f64;
        let vals: Vec<f64> = self.h.values.iter().zip(&self.d2h).map(|(h, m)| h * m.determinant() / n).collect();
        self.grid.integrate_values(&vals)
    }

    /// Uniform rescaling `t K`.
    pub fn scaled(&self, t: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            h: self.h.map(|v| v * t),
            grad_h: self.grad_h.iter().map(|g| g * t).collect(),
            hess_h: self.hess_h.iter().map(|m| m * t).collect(),
            d2h: self.d2h.iter().map(|m| m * t).collect(),
            residual: self.residual,
            spec: None,
        }
    }
}

/// Sample a body on a grid.
pub fn sample(spec: &BodySpec, grid: &Arc<SphereGrid>) -> Result<SupportField> {
    spec.validate()?;
    if spec.dim != grid.dim() {
        return Err(Error::InvalidArgument(format!("body dimension {} differs from grid dimension {}", spec.dim, grid.dim())));
    }
    let ell = spec.ell_matrix().map(|m| m.transpose());
    let h = grid.sample(|t| match &ell {
        Some(mt) => spec.family_support(&(mt * t)),
        None => spec.family_support(t),
    });
    let mut field = SupportField::from_values(grid.clone(), h)?;
    field.spec = Some(spec.clone());
    Ok(field)
}

/// Outcome of the smooth-strict-convexity check.
#[derive(Debug, Clone, Serialize)]
pub struct ValidityReport {
    pub min_h: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `max |h(theta) - h(-theta)|` relative to `max h`.
    pub evenness_defect: f64,
    pub interpolation_residual: f64,
    pub pass: bool,
}

/// Checks `h > 0`, `D2h` positive-definite and evenness on the grid.
pub fn validate(field: &SupportField) -> ValidityReport {
    let min_h = field.h.values.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in &field.d2h {
        let eig = m.clone().symmetric_eigen().eigenvalues;
        lo = lo.min(eig.min());
        hi = hi.max(eig.max());
    }
    let scale = field.h.max_abs().max(f64::MIN_POSITIVE);
    let grid = &field.grid;
    let defect = (0..grid.len())
        .map(|a| (field.h.values[a] - field.h.values[grid.antipode(a)]).abs())
        .fold(0.0_f64, f64::max)
        / scale;
    ValidityReport {
        min_h,
        min_eigenvalue: lo,
        max_eigenvalue: hi,
        evenness_defect: defect,
        interpolation_residual: field.residual,
        pass: min_h > 0.0 && lo > 0.0 && defect <= 1e-12,
    }
}

/// Sample and require validity.
pub fn sample_valid(spec: &BodySpec, grid: &Arc<SphereGrid>) -> Result<SupportField> {
    let field = sample(spec, grid)?;
    let report = validate(&field);
    if !report.pass {
        return Err(Error::InvalidBody(format!(
            "{}: min h = {:.3e}, min eig D2h = {:.3e}, evenness defect = {:.3e}",
            spec.label(),
            report.min_h,
            report.min_eigenvalue,
            report.evenness_defect
        )));
    }
    Ok(field)
}

//! Curvature, measures, the anisotropic metric `P_K = D^2(|x|_K^2 / 2)` and the
//! centro-affine structure `(g_K, nabla_K, nabla*_K)` of a sampled body.
//!
//! Connection coefficients are extracted from the structure equations
//! `D_u dX(v) = dX(nabla_u v) - g(u, v) X` and its conormal analogue: the
//! ambient derivative of each frame image is decomposed in the basis
//! `{dX(e_1), .., dX(e_{n-1}), X}`. The transversal coefficient has to reproduce
//! `-g`, which gives a built-in consistency residual.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::body::{self, BodySpec, SupportField};
use crate::certify::p_gamma;
use crate::error::{Error, Result};
use crate::sphere::{ScalarField, SphereGrid};

/// Default tolerance on the transversal (defining-relation) residual.
pub const DEFAULT_FRAME_TOLERANCE: f64 = 1e-6;

/// Connection coefficients of one node frame: `nabla_{e_i} e_j = sum_k c(i, j, k) e_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    d: usize,
    c: Vec<f64>,
}

impl Connection {
    pub fn zeros(d: usize) -> Self {
        Self { d, c: vec![0.0; d * d * d] }
    }

    pub fn from_flat(d: usize, c: Vec<f64>) -> Self {
        assert_eq!(c.len(), d * d * d);
        Self { d, c }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.c[(i * self.d + j) * self.d + k]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.c[(i * self.d + j) * self.d + k] = v;
    }
}

/// Centro-affine data of a body at every grid node.
#[derive(Debug, Clone)]
pub struct CentroAffineFrame {
    pub field: SupportField,
    /// Boundary points `X_K(theta)`.
    pub x: Vec<DVector<f64>>,
    /// Columns `dX(e_i)`.
    pub dx: Vec<DMatrix<f64>>,
    /// Conormal `theta / h`.
    pub xi_star: Vec<DVector<f64>>,
    /// Columns `d xi*(e_i)`.
    pub dxi_star: Vec<DMatrix<f64>>,
    /// `g_K = D2h / h` in node frames.
    pub g: Vec<DMatrix<f64>>,
    pub g_inv: Vec<DMatrix<f64>>,
    /// `1 / kappa_K = det(D2h)`.
    pub inv_kappa: ScalarField,
    pub christoffel: Vec<Connection>,
    pub christoffel_star: Vec<Connection>,
    /// `-` transversal coefficient of `D dX`, should equal `g`.
    pub metric_from_x: Vec<DMatrix<f64>>,
    /// `-` transversal coefficient of `D d xi*`, should equal `g`.
    pub metric_from_xi: Vec<DMatrix<f64>>,
    pub diagnostics: FrameDiagnostics,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrameDiagnostics {
    /// max |metric_from_x - g| relative to max |g|
    pub transversal_residual: f64,
    /// max |metric_from_xi - g| relative to max |g|
    pub transversal_residual_star: f64,
    /// max |metric_from_x - metric_from_xi| relative to max |g|
    pub metric_discrepancy: f64,
    /// max over nodes of |<xi*, X> - 1| and |<xi*, dX(e_i)>|
    pub conormal_residual: f64,
    /// largest interpolation residual of the differentiated ambient fields
    pub interpolation_residual: f64,
}

impl CentroAffineFrame {
    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.field.grid
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Cone-volume density `h det(D2h) / n` with respect to the spherical measure.
    pub fn cone_volume_density(&self) -> Vec<f64> {
        let n = self.dim() as f64;
        self.field.h.values.iter().zip(&self.inv_kappa.values).map(|(h, ik)| h * ik / n).collect()
    }

    pub fn volume(&self) -> f64 {
        self.grid().integrate_values(&self.cone_volume_density())
    }
}

/// Per-node derivative of ambient matrix fields along each frame direction:
/// `out[a][i]` is `D_{e_i} M` at node `a`.
fn directional_matrix_derivatives(grid: &SphereGrid, fields: &[DMatrix<f64>], residual: &mut f64) -> Vec<Vec<DMatrix<f64>>> {
    let (rows, cols) = fields[0].shape();
    let d = grid.tangent_dim();
    let n = grid.len();
    let mut out = vec![vec![DMatrix::zeros(rows, cols); d]; n];
    let mut comp = vec![0.0; n];
    for p in 0..rows {
        for q in 0..cols {
            for (a, m) in fields.iter().enumerate() {
                comp[a] = m[(p, q)];
            }
            let der = grid.differentiate_values(&comp);
            *residual = residual.max(der.residual);
            for a in 0..n {
                for i in 0..d {
                    out[a][i][(p, q)] = der.gradient[a][i];
                }
            }
        }
    }
    out
}

/// Decompose the frame derivatives `D_{e_i}(M e_j)` in the basis `[dmap, normal]`,
/// returning the connection and the negated transversal coefficients.
fn structure_decomposition(
    grid: &SphereGrid,
    node: usize,
    ambient: &DMatrix<f64>,
    ambient_derivs: &[DMatrix<f64>],
    basis: &DMatrix<f64>,
) -> Result<(Connection, DMatrix<f64>)> {
    let d = grid.tangent_dim();
    let lu = basis.clone().lu();
    let e = grid.frame(node);
    let mut conn = Connection::zeros(d);
    let mut metric = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let w = &ambient_derivs[i] * e.column(j) + ambient * grid.frame_derivative(node, i, j);
            let c = lu.solve(&w).ok_or_else(|| Error::FrameDecomposition {
                node,
                reason: "frame matrix is singular".into(),
            })?;
            for k in 0..d {
                conn.set(i, j, k, c[k]);
            }
            metric[(i, j)] = -c[d];
        }
    }
    Ok((conn, metric))
}

/// Assemble the centro-affine frame with the default residual tolerance.
pub fn frame(field: &SupportField) -> Result<CentroAffineFrame> {
    frame_with_tolerance(field, DEFAULT_FRAME_TOLERANCE)
}

pub fn frame_with_tolerance(field: &SupportField, tolerance: f64) -> Result<CentroAffineFrame> {
    let report = body::validate(field);
    if !report.pass {
        return Err(Error::InvalidBody(format!(
            "min h = {:.3e}, min eig D2h = {:.3e}, evenness defect = {:.3e}",
            report.min_h, report.min_eigenvalue, report.evenness_defect
        )));
    }
    let grid = field.grid.clone();
    let n = grid.dim();
    let d = grid.tangent_dim();
    let len = grid.len();

    let mut x = Vec::with_capacity(len);
    let mut dx = Vec::with_capacity(len);
    let mut xi_star = Vec::with_capacity(len);
    let mut dxi_star = Vec::with_capacity(len);
    let mut g = Vec::with_capacity(len);
    let mut g_inv = Vec::with_capacity(len);
    let mut hess_amb = Vec::with_capacity(len);
    let mut jac_amb = Vec::with_capacity(len);
    for a in 0..len {
        let e = grid.frame(a);
        let theta = grid.node(a);
        let h = field.h.values[a];
        let d2h = &field.d2h[a];
        let xa = field.boundary_point(a);
        let ha = e * d2h * e.transpose();
        let ja = DMatrix::identity(n, n) / h - theta * xa.transpose() / (h * h);
        dx.push(e * d2h);
        dxi_star.push(&ja * e);
        xi_star.push(theta / h);
        let ga = d2h / h;
        g_inv.push(ga.clone().try_inverse().ok_or_else(|| Error::FrameDecomposition {
            node: a,
            reason: "metric is singular".into(),
        })?);
        g.push(ga);
        x.push(xa);
        hess_amb.push(ha);
        jac_amb.push(ja);
    }

    let mut interp = 0.0_f64;
    let dh = directional_matrix_derivatives(&grid, &hess_amb, &mut interp);
    let dj = directional_matrix_derivatives(&grid, &jac_amb, &mut interp);

    let mut christoffel = Vec::with_capacity(len);
    let mut christoffel_star = Vec::with_capacity(len);
    let mut metric_from_x = Vec::with_capacity(len);
    let mut metric_from_xi = Vec::with_capacity(len);
    let mut conormal: f64 = 0.0;
    for a in 0..len {
        let mut basis = DMatrix::zeros(n, n);
        basis.view_mut((0, 0), (n, d)).copy_from(&dx[a]);
        basis.set_column(d, &x[a]);
        let (conn, mx) = structure_decomposition(&grid, a, &hess_amb[a], &dh[a], &basis)?;
        let mut basis_star = DMatrix::zeros(n, n);
        basis_star.view_mut((0, 0), (n, d)).copy_from(&dxi_star[a]);
        basis_star.set_column(d, &xi_star[a]);
        let (conn_star, mxi) = structure_decomposition(&grid, a, &jac_amb[a], &dj[a], &basis_star)?;
        christoffel.push(conn);
        christoffel_star.push(conn_star);
        metric_from_x.push(mx);
        metric_from_xi.push(mxi);
        conormal = conormal.max((xi_star[a].dot(&x[a]) - 1.0).abs());
        for i in 0..d {
            conormal = conormal.max(xi_star[a].dot(&dx[a].column(i)).abs());
        }
    }

    let gscale = g.iter().map(|m| m.amax()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let max_diff = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| {
        a.iter().zip(b).map(|(p, q)| (p - q).amax()).fold(0.0_f64, f64::max) / gscale
    };
    let diagnostics = FrameDiagnostics {
        transversal_residual: max_diff(&metric_from_x, &g),
        transversal_residual_star: max_diff(&metric_from_xi, &g),
        metric_discrepancy: max_diff(&metric_from_x, &metric_from_xi),
        conormal_residual: conormal,
        interpolation_residual: interp,
    };
    let worst = diagnostics.transversal_residual.max(diagnostics.transversal_residual_star);
    if worst > tolerance {
        let node = (0..len)
            .max_by(|&p, &q| {
                let rp = (&metric_from_x[p] - &g[p]).amax();
                let rq = (&metric_from_x[q] - &g[q]).amax();
                rp.total_cmp(&rq)
            })
            .unwrap_or(0);
        return Err(Error::FrameDecomposition {
            node,
            reason: format!("transversal residual {worst:.3e} exceeds {tolerance:.3e}"),
        });
    }

    let inv_kappa = field.inverse_curvature();
    Ok(CentroAffineFrame {
        field: field.clone(),
        x,
        dx,
        xi_star,
        dxi_star,
        g,
        g_inv,
        inv_kappa,
        christoffel,
        christoffel_star,
        metric_from_x,
        metric_from_xi,
        diagnostics,
    })
}

/// `1 / kappa_K = det(nabla^2 h + h delta)` per node.
pub fn curvature_density(field: &SupportField) -> ScalarField {
    field.inverse_curvature()
}

/// Density of `S_p K = h^{1-p} S_K` with respect to the spherical measure.
/// `p = 0` gives `n` times the cone-volume density.
pub fn measure_density(field: &SupportField, p: f64) -> ScalarField {
    let ik = field.inverse_curvature();
    field.h.zip_with(&ik, |h, k| h.powf(1.0 - p) * k).expect("same grid")
}

/// Cone-volume density `h / (n kappa)`.
pub fn cone_volume_density(field: &SupportField) -> ScalarField {
    let n = field.dim() as f64;
    measure_density(field, 0.0).map(|v| v / n)
}

/// `P_K` at the boundary point `X_K(theta_a)` in ambient coordinates:
/// `B^{-T} blockdiag(g, 1) B^{-1}` with `B = [dX(e_1), .., dX(e_{n-1}), X]`.
pub fn anisotropic_metric(frame: &CentroAffineFrame, node: usize) -> Result<DMatrix<f64>> {
    let n = frame.dim();
    let d = n - 1;
    let mut basis = DMatrix::zeros(n, n);
    basis.view_mut((0, 0), (n, d)).copy_from(&frame.dx[node]);
    basis.set_column(d, &frame.x[node]);
    let inv = basis.try_inverse().ok_or_else(|| Error::FrameDecomposition {
        node,
        reason: "boundary frame is singular".into(),
    })?;
    let mut block = DMatrix::zeros(n, n);
    block.view_mut((0, 0), (d, d)).copy_from(&frame.g[node]);
    block[(d, d)] = 1.0;
    let p = inv.transpose() * block * inv;
    Ok((&p + p.transpose()) * 0.5)
}

/// How the linear map in the pinching condition is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EllMode {
    Identity,
    /// Coordinate descent over diagonal maps minimizing the pinching ratio.
    AxisScaling,
    /// Map putting the body's second-moment matrix in isotropic position.
    Isotropic,
}

impl std::str::FromStr for EllMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(EllMode::Identity),
            "axis" | "axis-scaling" => Ok(EllMode::AxisScaling),
            "isotropic" => Ok(EllMode::Isotropic),
            other => Err(Error::InvalidArgument(format!("unknown ell mode `{other}`"))),
        }
    }
}

/// Pinching constants of `P_{ell K}` over the sampled boundary.
#[derive(Debug, Clone, Serialize)]
pub struct PinchingReport {
    pub mode: EllMode,
    /// Row-major map applied to the body.
    pub ell: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p_gamma: f64,
    pub argmin: usize,
    pub argmax: usize,
    /// Search fell back to the identity map.
    pub fallback: bool,
    pub warning: Option<String>,
    /// Grid-sampled estimate, not a rigorous bound.
    pub sampled_estimate: bool,
}

fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let e = m.clone().symmetric_eigen().eigenvalues;
    (e.min(), e.max())
}

/// Extremes of the eigenvalues of `ell^{-T} P_K ell^{-1}` over the nodes.
/// With `ell` this evaluates `P_{ell K}` at the mapped boundary samples.
fn pinching_extremes(ps: &[DMatrix<f64>], ell_inv: Option<&DMatrix<f64>>) -> (f64, f64, usize, usize) {
    let mut lo = (f64::INFINITY, 0);
    let mut hi = (f64::NEG_INFINITY, 0);
    for (a, p) in ps.iter().enumerate() {
        let (mn, mx) = match ell_inv {
            Some(li) => eig_extremes(&(li.transpose() * p * li)),
            None => eig_extremes(p),
        };
        if mn < lo.0 {
            lo = (mn, a);
        }
        if mx > hi.0 {
            hi = (mx, a);
        }
    }
    (lo.0, hi.0, lo.1, hi.1)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn identity_pinching(frame: &CentroAffineFrame, ps: &[DMatrix<f64>]) -> Result<PinchingReport> {
    let (alpha, beta, argmin, argmax) = pinching_extremes(ps, None);
    report_from(frame.dim(), EllMode::Identity, DMatrix::identity(frame.dim(), frame.dim()), alpha, beta, argmin, argmax)
}

fn report_from(
    n: usize,
    mode: EllMode,
    ell: DMatrix<f64>,
    alpha: f64,
    beta: f64,
    argmin: usize,
    argmax: usize,
) -> Result<PinchingReport> {
    if !(alpha > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidBody(format!("anisotropic metric not positive-definite (alpha = {alpha:.3e})")));
    }
    let gamma = (beta / alpha).max(1.0);
    Ok(PinchingReport {
        mode,
        ell: matrix_rows(&ell),
        alpha,
        beta,
        gamma,
        p_gamma: p_gamma(n, gamma)?,
        argmin,
        argmax,
        fallback: false,
        warning: None,
        sampled_estimate: true,
    })
}

fn all_metrics(frame: &CentroAffineFrame) -> Result<Vec<DMatrix<f64>>> {
    (0..frame.len()).map(|a| anisotropic_metric(frame, a)).collect()
}

/// Pinching of `ell K` evaluated at the mapped samples `ell X_K(theta_a)`,
/// using `P_{ell K}(ell x) = ell^{-T} P_K(x) ell^{-1}`.
pub fn pinching_with_map(frame: &CentroAffineFrame, ell: &DMatrix<f64>) -> Result<PinchingReport> {
    let n = frame.dim();
    if ell.shape() != (n, n) {
        return Err(Error::InvalidArgument(format!("map must be {n}x{n}")));
    }
    let inv = ell.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("map is singular".into()))?;
    let (alpha, beta, argmin, argmax) = pinching_extremes(&all_metrics(frame)?, Some(&inv));
    report_from(n, EllMode::Identity, ell.clone(), alpha, beta, argmin, argmax)
}

/// Pinching of `ell K` obtained by resampling the mapped body on the grid.
pub fn pinching_for_map(spec: &BodySpec, grid: &Arc<SphereGrid>, ell: &DMatrix<f64>) -> Result<PinchingReport> {
    let mapped = spec.mapped(ell);
    let field = body::sample_valid(&mapped, grid)?;
    let fr = frame(&field)?;
    let mut report = identity_pinching(&fr, &all_metrics(&fr)?)?;
    report.ell = matrix_rows(ell);
    Ok(report)
}

/// Second-moment matrix of the body, `int_K x x^T dx`, from the cone decomposition.
pub fn second_moments(frame: &CentroAffineFrame) -> DMatrix<f64> {
    let n = frame.dim();
    let dens = frame.cone_volume_density();
    let w = frame.grid().weights();
    let mut m = DMatrix::zeros(n, n);
    for a in 0..frame.len() {
        m += &frame.x[a] * frame.x[a].transpose() * (w[a] * dens[a]);
    }
    m * (n as f64 / (n as f64 + 2.0))
}

fn golden_min(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
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
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Diagonal map minimizing the pinching ratio, by coordinate descent on the
/// log-scales of axes 2..n (axis 1 fixed; the ratio is scale invariant).
fn axis_scaling_search(ps: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let ratio = |logs: &[f64]| {
        let li = DMatrix::from_diagonal(&DVector::from_iterator(n, logs.iter().map(|l| (-l).exp())));
        let (lo, hi, _, _) = pinching_extremes(ps, Some(&li));
        hi / lo
    };
    let mut logs = vec![0.0; n];
    let mut best = ratio(&logs);
    for _sweep in 0..40 {
        let before = best;
        for k in 1..n {
            let centre = logs[k];
            let along = |t: f64| {
                let mut l = logs.clone();
                l[k] = t;
                ratio(&l)
            };
            // coarse bracket, then golden refinement
            let span = 2.0;
            let samples = 41;
            let mut arg = centre;
            let mut val = best;
            for s in 0..samples {
                let t = centre - span + 2.0 * span * s as f64 / (samples - 1) as f64;
                let v = along(t);
                if v < val {
                    val = v;
                    arg = t;
                }
            }
            let h = 2.0 * span / (samples - 1) as f64;
            let (t, v) = golden_min(&along, arg - h, arg + h, 1e-11);
            if v < best {
                best = v;
                logs[k] = t;
            } else if val < best {
                best = val;
                logs[k] = arg;
            }
        }
        if before - best <= 1e-13 * before {
            break;
        }
    }
    DMatrix::from_diagonal(&DVector::from_iterator(n, logs.iter().map(|l| l.exp())))
}

/// Pinching constants with the map chosen by `mode`. Non-identity modes
/// resample `ell K` from the body spec carried by the frame's field; if that
/// is unavailable, fails, or is worse than the identity, the identity report
/// is returned with `fallback` set.
pub fn pinching(frame: &CentroAffineFrame, mode: EllMode) -> Result<PinchingReport> {
    let ps = all_metrics(frame)?;
    let identity = identity_pinching(frame, &ps)?;
    if mode == EllMode::Identity {
        return Ok(identity);
    }
    let fallback = |why: String| {
        let mut r = identity.clone();
        r.mode = mode;
        r.fallback = true;
        r.warning = Some(why);
        r
    };
    let Some(spec) = frame.field.spec.as_ref() else {
        return Ok(fallback("no body spec available to resample the mapped body".into()));
    };
    let n = frame.dim();
    let ell = match mode {
        EllMode::AxisScaling => axis_scaling_search(&ps, n),
        EllMode::Isotropic => {
            let eig = second_moments(frame).symmetric_eigen();
            let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
            let l = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
            let det = l.determinant().abs();
            l / det.powf(1.0 / n as f64)
        }
        EllMode::Identity => unreachable!(),
    };
    match pinching_for_map(spec, frame.grid(), &ell) {
        Ok(mut r) if r.gamma <= identity.gamma => {
            r.mode = mode;
            Ok(r)
        }
        Ok(r) => Ok(fallback(format!("map search gave gamma {:.6} worse than identity {:.6}", r.gamma, identity.gamma))),
        Err(e) => Ok(fallback(format!("resampling the mapped body failed: {e}"))),
    }
}

/// Conjugate Hessian `Hess*_K f` in node frames and its `g`-trace.
#[derive(Debug, Clone)]
pub struct HessStar {
    pub tensor: Vec<DMatrix<f64>>,
    pub trace: ScalarField,
    pub gradient: Vec<DVector<f64>>,
}

/// `Hess* f(e_i, e_j) = e_j(e_i f) - df(nabla*_{e_j} e_i)`.
pub fn hess_star(frame: &CentroAffineFrame, f: &ScalarField) -> Result<HessStar> {
    let grid = frame.grid();
    let der = grid.differentiate(f)?;
    let d = grid.tangent_dim();
    let mut tensor = Vec::with_capacity(frame.len());
    let mut trace = Vec::with_capacity(frame.len());
    for a in 0..frame.len() {
        let round = grid.round_connection(a);
        let star = &frame.christoffel_star[a];
        let grad = &der.gradient[a];
        let mut t = der.hessian[a].clone();
        for i in 0..d {
            for j in 0..d {
                let mut corr = 0.0;
                for k in 0..d {
                    corr += (round[(j * d + i) * d + k] - star.get(j, i, k)) * grad[k];
                }
                t[(i, j)] += corr;
            }
        }
        let t = (&t + t.transpose()) * 0.5;
        trace.push(frame.g_inv[a].component_mul(&t).sum());
        tensor.push(t);
    }
    Ok(HessStar { tensor, trace: ScalarField::new(grid, trace)?, gradient: der.gradient })
}

/// Maximal defect of `nabla_i(g^{jk} w_k) = g^{jk} nabla*_i w_k` for the 1-form
/// given by the tangential part of an ambient vector field `w` (one scalar
/// field per ambient component), relative to the size of the left side.
pub fn conjugacy_defect(frame: &CentroAffineFrame, w_components: &[ScalarField]) -> Result<f64> {
    let grid = frame.grid();
    let n = grid.dim();
    let d = n - 1;
    if w_components.len() != n {
        return Err(Error::InvalidArgument(format!("expected {n} ambient components")));
    }
    for c in w_components {
        grid.check(c)?;
    }
    let len = frame.len();
    // tangential ambient 1-form and its g-dual vector, both as ambient fields
    let mut w_amb = Vec::with_capacity(len);
    let mut v_amb = Vec::with_capacity(len);
    let mut omega = Vec::with_capacity(len);
    let mut vfr = Vec::with_capacity(len);
    for a in 0..len {
        let theta = grid.node(a);
        let raw = DVector::from_iterator(n, w_components.iter().map(|c| c.values[a]));
        let w = &raw - theta * theta.dot(&raw);
        let e = grid.frame(a);
        let om = e.transpose() * &w;
        let v = &frame.g_inv[a] * &om;
        v_amb.push(DMatrix::from_column_slice(n, 1, (e * &v).as_slice()));
        w_amb.push(DMatrix::from_column_slice(n, 1, w.as_slice()));
        omega.push(om);
        vfr.push(v);
    }
    let mut interp = 0.0;
    let dw = directional_matrix_derivatives(grid, &w_amb, &mut interp);
    let dv = directional_matrix_derivatives(grid, &v_amb, &mut interp);
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for a in 0..len {
        let e = grid.frame(a);
        let conn = &frame.christoffel[a];
        let star = &frame.christoffel_star[a];
        for i in 0..d {
            let de_i = |k: usize| grid.frame_derivative(a, i, k);
            let d_omega: Vec<f64> = (0..d)
                .map(|k| de_i(k).dot(&w_amb[a].column(0)) + e.column(k).dot(&dw[a][i].column(0)))
                .collect();
            let d_v: Vec<f64> = (0..d)
                .map(|j| de_i(j).dot(&v_amb[a].column(0)) + e.column(j).dot(&dv[a][i].column(0)))
                .collect();
            let star_cov: Vec<f64> = (0..d)
                .map(|k| d_omega[k] - (0..d).map(|m| omega[a][m] * star.get(i, k, m)).sum::<f64>())
                .collect();
            for j in 0..d {
                let lhs = d_v[j] + (0..d).map(|m| vfr[a][m] * conn.get(i, m, j)).sum::<f64>();
                let rhs: f64 = (0..d).map(|k| frame.g_inv[a][(j, k)] * star_cov[k]).sum();
                worst = worst.max((lhs - rhs).abs());
                scale = scale.max(lhs.abs());
            }
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::sample;

    fn frame_of(spec: &BodySpec, res: usize) -> CentroAffineFrame {
        let g = SphereGrid::new(spec.dim, res).unwrap().shared();
        frame(&sample(spec, &g).unwrap()).unwrap()
    }

    #[test]
    fn ball_frame_is_round() {
        for (dim, res) in [(2, 64), (3, 16)] {
            let fr = frame_of(&BodySpec::ball(dim, 1.0), res);
            let grid = fr.grid().clone();
            for a in 0..fr.len() {
                assert!((&fr.x[a] - grid.node(a)).norm() < 1e-13);
                assert!((&fr.xi_star[a] - grid.node(a)).norm() < 1e-13);
                assert!((&fr.g[a] - DMatrix::identity(dim - 1, dim - 1)).amax() < 1e-12);
                let round = Connection::from_flat(dim - 1, grid.round_connection(a));
                for i in 0..dim - 1 {
                    for j in 0..dim - 1 {
                        for k in 0..dim - 1 {
                            assert!((fr.christoffel[a].get(i, j, k) - round.get(i, j, k)).abs() < 1e-9);
                            assert!((fr.christoffel_star[a].get(i, j, k) - round.get(i, j, k)).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ellipse_metric_from_both_normals_agrees() {
        let fr = frame_of(&BodySpec::ellipsoid(&[1.0, 2.0]), 256);
        assert!(fr.diagnostics.metric_discrepancy <= 1e-6);
        assert!(fr.diagnostics.transversal_residual <= 1e-6);
        assert!(fr.diagnostics.conormal_residual <= 1e-8);
    }

    #[test]
    fn ellipse_curvature_and_area() {
        let g = SphereGrid::new(2, 256).unwrap().shared();
        let f = sample(&BodySpec::ellipsoid(&[1.0, 2.0]), &g).unwrap();
        let ik = curvature_density(&f);
        assert!((ik.values[0] - 4.0).abs() < 1e-10);
        let vol = g.integrate(&cone_volume_density(&f)).unwrap();
        assert!((vol - 2.0 * std::f64::consts::PI).abs() < 1e-10);
        let b = sample(&BodySpec::ball(3, 1.5), &SphereGrid::new(3, 16).unwrap().shared()).unwrap();
        for v in curvature_density(&b).values {
            assert!((v - 2.25).abs() < 1e-12);
        }
    }

    #[test]
    fn centro_affine_curvature_of_ellipse_is_constant() {
        let g = SphereGrid::new(2, 256).unwrap().shared();
        let f = sample(&BodySpec::ellipsoid(&[1.0, 2.0]), &g).unwrap();
        let dens = measure_density(&f, -2.0);
        let mean = dens.values.iter().sum::<f64>() / dens.len() as f64;
        for v in &dens.values {
            assert!((v - mean).abs() < 1e-6 * mean);
        }
        let ball = sample(&BodySpec::ball(2, 1.0), &g).unwrap();
        for p in [-1.5, 0.0, 0.5] {
            assert!(measure_density(&ball, p).values.iter().all(|v| (v - 1.0).abs() < 1e-13));
        }
    }

    #[test]
    fn ellipse_anisotropic_metric_is_constant_quadratic_form() {
        let fr = frame_of(&BodySpec::ellipsoid(&[1.0, 2.0]), 256);
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
        for a in 0..fr.len() {
            assert!((anisotropic_metric(&fr, a).unwrap() - &expect).amax() < 1e-8);
        }
        let r = pinching(&fr, EllMode::Identity).unwrap();
        assert!((r.alpha - 0.25).abs() < 1e-8 && (r.beta - 1.0).abs() < 1e-8);
        assert!((r.gamma - 4.0).abs() < 1e-8 && (r.p_gamma - 0.25).abs() < 1e-8);
    }

    #[test]
    fn ball_pinching_is_trivial() {
        let fr = frame_of(&BodySpec::ball(3, 1.0), 16);
        let r = pinching(&fr, EllMode::Identity).unwrap();
        assert!((r.alpha - 1.0).abs() < 1e-10 && (r.beta - 1.0).abs() < 1e-10);
        assert!((r.p_gamma + 3.0).abs() < 1e-9);
    }

    #[test]
    fn axis_scaling_maps_ellipse_to_disc() {
        let fr = frame_of(&BodySpec::ellipsoid(&[1.0, 2.0]), 128);
        let r = pinching(&fr, EllMode::AxisScaling).unwrap();
        assert!(!r.fallback);
        assert!(r.gamma < 1.0 + 1e-6, "gamma = {}", r.gamma);
        let iso = pinching(&fr, EllMode::Isotropic).unwrap();
        assert!(iso.gamma < 1.0 + 1e-6, "gamma = {}", iso.gamma);
    }

    #[test]
    fn radial_normalization_and_orthogonality() {
        let fr = frame_of(&BodySpec::perturbed_ball(3, 1.0, &[(2, 0.08), (4, 0.02)]), 32);
        for a in 0..fr.len() {
            let p = anisotropic_metric(&fr, a).unwrap();
            let x = &fr.x[a];
            assert!(((x.transpose() * &p * x)[0] - 1.0).abs() < 1e-8);
            for i in 0..2 {
                assert!((x.transpose() * &p * fr.dx[a].column(i))[0].abs() < 1e-8);
            }
            // tangential block is g
            let tb = fr.dx[a].transpose() * &p * &fr.dx[a];
            assert!((tb - &fr.g[a]).amax() < 1e-10);
        }
    }

    #[test]
    fn hess_star_on_ball_is_round_hessian() {
        let g = SphereGrid::new(3, 16).unwrap().shared();
        let fr = frame(&sample(&BodySpec::ball(3, 1.0), &g).unwrap()).unwrap();
        let f = g.sample(|t| t[0] * t[1] + t[2].powi(3));
        let hs = hess_star(&fr, &f).unwrap();
        let der = g.differentiate(&f).unwrap();
        for a in 0..g.len() {
            assert!((hs.trace.values[a] - der.hessian[a].trace()).abs() < 1e-8);
        }
        let c = hess_star(&fr, &ScalarField::constant(&g, 2.0)).unwrap();
        assert!(c.tensor.iter().all(|t| t.amax() < 1e-12));
    }
}

//! Quadrature grids on the unit sphere S^{n-1} for n = 2 and n = 3.
//!
//! The circle uses the uniform rule; the 2-sphere uses a Gauss–Legendre rule in
//! `z = cos(colatitude)` times a uniform rule in longitude. Both grids are
//! antipodally closed, so parity splitting is an exact index permutation.
//!
//! Functions are differentiated through their band-limited interpolant
//! (Fourier series on S^1, real spherical harmonics on S^2). Tangent vectors and
//! 2-tensors are expressed in a per-node orthonormal frame: `e_phi` on the
//! circle, `(e_colat, e_lon)` on the 2-sphere.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};

/// Relative size below which expansion coefficients are treated as roundoff.
const NOISE_FLOOR: f64 = 16.0 * f64::EPSILON;

/// Default relative threshold on the interpolation residual.
pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 1e-8;

/// Identifies a grid: two grids with equal keys are bit-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridKey {
    pub dim: usize,
    pub resolution: usize,
}

impl fmt::Display for GridKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S^{}[res {}]", self.dim - 1, self.resolution)
    }
}

/// Normalized associated Legendre values on one latitude ring.
#[derive(Debug, Clone)]
struct LegendreRing {
    p: Vec<f64>,
    dp: Vec<f64>,
    d2p: Vec<f64>,
}

#[inline]
fn lm_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

#[derive(Debug, Clone)]
enum Layout {
    Circle {
        m: usize,
        phi: Vec<f64>,
    },
    Product {
        nlat: usize,
        nlon: usize,
        z: Vec<f64>,
        sin_colat: Vec<f64>,
        lat_weights: Vec<f64>,
        // cos_tab[m * nlon + j] = cos(m phi_j)
        cos_tab: Vec<f64>,
        sin_tab: Vec<f64>,
        rings: Vec<LegendreRing>,
        lmax: usize,
    },
}

/// Quadrature grid on S^{n-1}.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    dim: usize,
    resolution: usize,
    degree: usize,
    nodes: Vec<DVector<f64>>,
    weights: Vec<f64>,
    antipode: Vec<usize>,
    frames: Vec<DMatrix<f64>>,
    layout: Layout,
    residual_threshold: f64,
}

/// Scalar samples on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    key: GridKey,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: &SphereGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "field has {} values but grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { key: grid.key(), values })
    }

    pub fn constant(grid: &SphereGrid, c: f64) -> Self {
        Self { key: grid.key(), values: vec![c; grid.len()] }
    }

    pub fn key(&self) -> GridKey {
        self.key
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Pointwise map, same grid.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { key: self.key, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_same(self.key, other.key)?;
        Ok(Self {
            key: self.key,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

fn check_same(expected: GridKey, found: GridKey) -> Result<()> {
    if expected != found {
        return Err(Error::GridMismatch { expected: expected.to_string(), found: found.to_string() });
    }
    Ok(())
}

/// First and second covariant derivatives in node frames.
#[derive(Debug, Clone)]
pub struct Derivatives {
    /// The band-limited interpolant that was differentiated, at the nodes.
    pub values: Vec<f64>,
    pub gradient: Vec<DVector<f64>>,
    pub hessian: Vec<DMatrix<f64>>,
    /// Relative size of the unresolved tail of the input.
    pub residual: f64,
}

/// Parity of a basis function under `theta -> -theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of_degree(degree: usize) -> Self {
        if degree % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        })
    }
}

/// Label of one L²(m)-orthonormal basis function.
///
/// On S^1, `order` is the frequency and `sine` selects `sin(k phi)`. On S^2,
/// `(degree, order)` index the real harmonic built from `P_l^m cos(m phi)` or
/// `P_l^m sin(m phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisLabel {
    pub degree: usize,
    pub order: usize,
    pub sine: bool,
}

impl BasisLabel {
    pub fn parity(&self) -> Parity {
        Parity::of_degree(self.degree)
    }
}

/// Orthonormal harmonic basis up to a degree, tabulated on a grid.
#[derive(Debug, Clone)]
pub struct HarmonicBasis {
    pub degree: usize,
    pub labels: Vec<BasisLabel>,
    /// nodes x functions
    pub values: DMatrix<f64>,
    /// one nodes x functions matrix per frame direction
    pub gradients: Vec<DMatrix<f64>>,
}

impl HarmonicBasis {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of functions with the given parity.
    pub fn indices_of(&self, parity: Parity) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| l.parity() == parity).map(|(i, _)| i).collect()
    }

    /// Evaluate `sum_k coeffs[k] phi_k` at every node.
    pub fn synthesize(&self, grid: &SphereGrid, coeffs: &[f64]) -> ScalarField {
        let c = DVector::from_column_slice(coeffs);
        let v = &self.values * c;
        ScalarField { key: grid.key(), values: v.iter().copied().collect() }
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], ascending, mirrored exactly.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // Tricomi initial guess for the i-th largest root.
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() <= 4.0 * f64::EPSILON {
                let (_, d) = legendre_and_derivative(n, t);
                dp = d;
                break;
            }
        }
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        // i-th largest root at ascending position n-1-i, its mirror at i
        x[n - 1 - i] = t;
        x[i] = -t;
        w[n - 1 - i] = wi;
        w[i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn legendre_ring(z: f64, s: f64, lmax: usize) -> LegendreRing {
    // tables up to lmax + 1 for the derivative recurrence
    let top = lmax + 1;
    let size = lm_index(top, top) + 1;
    let mut p = vec![0.0; size];
    p[0] = 1.0 / (4.0 * PI).sqrt();
    for m in 1..=top {
        let mf = m as f64;
        p[lm_index(m, m)] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[lm_index(m - 1, m - 1)];
    }
    for m in 0..top {
        p[lm_index(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * z * p[lm_index(m, m)];
    }
    for m in 0..=top {
        for l in (m + 2)..=top {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[lm_index(l, m)] = a * (z * p[lm_index(l - 1, m)] - b * p[lm_index(l - 2, m)]);
        }
    }
    let mut dp = vec![0.0; size];
    let mut d2p = vec![0.0; size];
    for l in 0..=lmax {
        for m in 0..=l {
            let (lf, mf) = (l as f64, m as f64);
            let c = ((2.0 * lf + 1.0) * (lf + 1.0 + mf) * (lf + 1.0 - mf) / (2.0 * lf + 3.0)).sqrt();
            let k = lm_index(l, m);
            let d = -((lf + 1.0) * z * p[k] - c * p[lm_index(l + 1, m)]) / s;
            dp[k] = d;
            d2p[k] = -(z / s) * d - (lf * (lf + 1.0) - mf * mf / (s * s)) * p[k];
        }
    }
    LegendreRing { p, dp, d2p }
}

impl SphereGrid {
    /// Build an antipodally closed grid.
    ///
    /// For n = 2, `resolution` is the number of equispaced nodes. For n = 3 it
    /// is the number of Gauss–Legendre latitudes; the longitude count is twice
    /// that.
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedDimension(dim));
        }
        if resolution % 2 != 0 {
            return Err(Error::InvalidResolution { resolution, reason: "must be even for antipodal closure" });
        }
        if resolution < 8 {
            return Err(Error::InvalidResolution { resolution, reason: "must be at least 8" });
        }
        Ok(if dim == 2 { Self::circle(resolution) } else { Self::product(resolution) })
    }

    fn circle(m: usize) -> Self {
        let half = m / 2;
        let mut nodes = vec![DVector::zeros(2); m];
        let mut frames = vec![DMatrix::zeros(2, 1); m];
        let mut phi = vec![0.0; m];
        for a in 0..half {
            let p = 2.0 * PI * a as f64 / m as f64;
            let (s, c) = p.sin_cos();
            phi[a] = p;
            phi[a + half] = p + PI;
            nodes[a] = DVector::from_vec(vec![c, s]);
            nodes[a + half] = DVector::from_vec(vec![-c, -s]);
            frames[a] = DMatrix::from_column_slice(2, 1, &[-s, c]);
            frames[a + half] = DMatrix::from_column_slice(2, 1, &[s, -c]);
        }
        let antipode = (0..m).map(|a| (a + half) % m).collect();
        Self {
            dim: 2,
            resolution: m,
            degree: m / 2 - 1,
            nodes,
            weights: vec![2.0 * PI / m as f64; m],
            antipode,
            frames,
            layout: Layout::Circle { m, phi },
            residual_threshold: DEFAULT_RESIDUAL_THRESHOLD,
        }
    }

    fn product(nlat: usize) -> Self {
        let nlon = 2 * nlat;
        let (z, lat_weights) = gauss_legendre(nlat);
        let sin_colat: Vec<f64> = z.iter().map(|&zi| (1.0 - zi * zi).sqrt()).collect();
        let lmax = nlat - 1;
        let half = nlon / 2;
        let mut cphi = vec![0.0; nlon];
        let mut sphi = vec![0.0; nlon];
        for j in 0..half {
            let (s, c) = (2.0 * PI * j as f64 / nlon as f64).sin_cos();
            cphi[j] = c;
            sphi[j] = s;
            cphi[j + half] = -c;
            sphi[j + half] = -s;
        }
        let mut cos_tab = vec![0.0; (lmax + 1) * nlon];
        let mut sin_tab = vec![0.0; (lmax + 1) * nlon];
        for m in 0..=lmax {
            for j in 0..nlon {
                let (s, c) = (2.0 * PI * (m * j % nlon) as f64 / nlon as f64).sin_cos();
                cos_tab[m * nlon + j] = c;
                sin_tab[m * nlon + j] = s;
            }
        }
        let n_nodes = nlat * nlon;
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut frames = Vec::with_capacity(n_nodes);
        let mut weights = Vec::with_capacity(n_nodes);
        let mut antipode = Vec::with_capacity(n_nodes);
        let dphi = 2.0 * PI / nlon as f64;
        for i in 0..nlat {
            let (zi, si) = (z[i], sin_colat[i]);
            for j in 0..nlon {
                let (c, s) = (cphi[j], sphi[j]);
                nodes.push(DVector::from_vec(vec![si * c, si * s, zi]));
                frames.push(DMatrix::from_column_slice(3, 2, &[zi * c, zi * s, -si, -s, c, 0.0]));
                weights.push(lat_weights[i] * dphi);
                antipode.push((nlat - 1 - i) * nlon + (j + half) % nlon);
            }
        }
        let rings = (0..nlat).map(|i| legendre_ring(z[i], sin_colat[i], lmax)).collect();
        Self {
            dim: 3,
            resolution: nlat,
            degree: lmax,
            nodes,
            weights,
            antipode,
            frames,
            layout: Layout::Product { nlat, nlon, z, sin_colat, lat_weights, cos_tab, sin_tab, rings, lmax },
            residual_threshold: DEFAULT_RESIDUAL_THRESHOLD,
        }
    }

    /// Override the relative interpolation-residual threshold.
    pub fn with_residual_threshold(mut self, threshold: f64) -> Self {
        self.residual_threshold = threshold;
        self
    }

    pub fn shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    pub fn key(&self) -> GridKey {
        GridKey { dim: self.dim, resolution: self.resolution }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tangent_dim(&self) -> usize {
        self.dim - 1
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Maximal harmonic degree L such that products of degree-L functions are
    /// integrated exactly.
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn residual_threshold(&self) -> f64 {
        self.residual_threshold
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    pub fn node(&self, a: usize) -> &DVector<f64> {
        &self.nodes[a]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn antipode(&self, a: usize) -> usize {
        self.antipode[a]
    }

    /// Orthonormal tangent frame at node `a`, columns are the frame vectors.
    pub fn frame(&self, a: usize) -> &DMatrix<f64> {
        &self.frames[a]
    }

    /// Total measure of S^{n-1}.
    pub fn total_measure(&self) -> f64 {
        if self.dim == 2 {
            2.0 * PI
        } else {
            4.0 * PI
        }
    }

    /// Minimal geodesic spacing between neighbouring nodes.
    pub fn min_spacing(&self) -> f64 {
        match &self.layout {
            Layout::Circle { m, .. } => 2.0 * PI / *m as f64,
            Layout::Product { nlon, sin_colat, z, .. } => {
                let lon = sin_colat[0] * 2.0 * PI / *nlon as f64;
                let lat = z.windows(2).map(|w| w[0].acos() - w[1].acos()).fold(f64::INFINITY, |m, d| m.min(d.abs()));
                lon.min(lat)
            }
        }
    }

    pub fn check(&self, f: &ScalarField) -> Result<()> {
        check_same(self.key(), f.key)
    }

    /// Sample a function of the unit vector.
    pub fn sample(&self, f: impl Fn(&DVector<f64>) -> f64) -> ScalarField {
        ScalarField { key: self.key(), values: self.nodes.iter().map(f).collect() }
    }

    /// Quadrature: sum of `w_a f_a`.
    pub fn integrate(&self, f: &ScalarField) -> Result<f64> {
        self.check(f)?;
        Ok(self.weights.iter().zip(&f.values).map(|(w, v)| w * v).sum())
    }

    /// Quadrature of an unchecked value slice.
    pub fn integrate_values(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Even and odd parts under the antipodal map.
    pub fn parity_split(&self, f: &ScalarField) -> Result<(ScalarField, ScalarField)> {
        self.check(f)?;
        let even: Vec<f64> =
            (0..self.len()).map(|a| 0.5 * (f.values[a] + f.values[self.antipode[a]])).collect();
        let odd = f.values.iter().zip(&even).map(|(v, e)| v - e).collect();
        Ok((ScalarField { key: self.key(), values: even }, ScalarField { key: self.key(), values: odd }))
    }

    /// Gradient and covariant Hessian of the band-limited interpolant, failing
    /// when the input is not resolved by the grid.
    pub fn differentiate(&self, f: &ScalarField) -> Result<Derivatives> {
        self.check(f)?;
        let d = self.differentiate_values(&f.values);
        if d.residual > self.residual_threshold {
            return Err(Error::UnderResolved {
                residual: d.residual,
                threshold: self.residual_threshold,
                context: format!("differentiating a field on {}", self.key()),
            });
        }
        Ok(d)
    }

    /// Like [`differentiate`](Self::differentiate) but reports the residual
    /// instead of failing.
    pub fn differentiate_values(&self, values: &[f64]) -> Derivatives {
        assert_eq!(values.len(), self.len(), "value count does not match grid");
        match &self.layout {
            Layout::Circle { m, .. } => circle_derivatives(*m, values),
            Layout::Product { .. } => self.product_derivatives(values),
        }
    }

    /// Round Levi-Civita connection of the node frame:
    /// `nabla_{e_i} e_j = sum_k c[(i*d + j)*d + k] e_k`.
    pub fn round_connection(&self, a: usize) -> Vec<f64> {
        match &self.layout {
            Layout::Circle { .. } => vec![0.0],
            Layout::Product { nlon, z, sin_colat, .. } => {
                let i = a / nlon;
                let cot = z[i] / sin_colat[i];
                // e_0 = e_colat, e_1 = e_lon
                let mut c = vec![0.0; 8];
                c[(2 + 0) * 2 + 1] = cot; // nabla_{e_lon} e_colat = cot e_lon
                c[(2 + 1) * 2] = -cot; // nabla_{e_lon} e_lon = -cot e_colat
                c
            }
        }
    }

    /// Ambient derivative `D_{e_i} e_j` of the frame fields at node `a`.
    pub fn frame_derivative(&self, a: usize, i: usize, j: usize) -> DVector<f64> {
        let d = self.tangent_dim();
        let conn = self.round_connection(a);
        let e = &self.frames[a];
        let mut v = DVector::zeros(self.dim);
        for k in 0..d {
            v += e.column(k) * conn[(i * d + j) * d + k];
        }
        if i == j {
            v -= &self.nodes[a];
        }
        v
    }

    /// Orthonormal harmonic basis up to `degree`, tabulated with frame gradients.
    pub fn harmonic_basis(&self, degree: usize) -> Result<HarmonicBasis> {
        if degree > self.degree {
            return Err(Error::InvalidArgument(format!(
                "basis degree {degree} exceeds grid degree {}",
                self.degree
            )));
        }
        match &self.layout {
            Layout::Circle { phi, .. } => Ok(circle_basis(phi, degree)),
            Layout::Product { nlat, nlon, sin_colat, cos_tab, sin_tab, rings, .. } => {
                let mut labels = Vec::new();
                for l in 0..=degree {
                    labels.push(BasisLabel { degree: l, order: 0, sine: false });
                    for m in 1..=l {
                        labels.push(BasisLabel { degree: l, order: m, sine: false });
                        labels.push(BasisLabel { degree: l, order: m, sine: true });
                    }
                }
                let n = self.len();
                let nb = labels.len();
                let mut values = DMatrix::zeros(n, nb);
                let mut g0 = DMatrix::zeros(n, nb);
                let mut g1 = DMatrix::zeros(n, nb);
                for i in 0..*nlat {
                    let ring = &rings[i];
                    let s = sin_colat[i];
                    for j in 0..*nlon {
                        let a = i * nlon + j;
                        for (k, lab) in labels.iter().enumerate() {
                            let (l, m) = (lab.degree, lab.order);
                            let norm = if m == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
                            let idx = lm_index(l, m);
                            let (c, sn) = (cos_tab[m * nlon + j], sin_tab[m * nlon + j]);
                            let (trig, dtrig) = if lab.sine { (sn, m as f64 * c) } else { (c, -(m as f64) * sn) };
                            values[(a, k)] = norm * ring.p[idx] * trig;
                            g0[(a, k)] = norm * ring.dp[idx] * trig;
                            g1[(a, k)] = norm * ring.p[idx] * dtrig / s;
                        }
                    }
                }
                Ok(HarmonicBasis { degree, labels, values, gradients: vec![g0, g1] })
            }
        }
    }

    fn product_derivatives(&self, values: &[f64]) -> Derivatives {
        let Layout::Product { nlat, nlon, z, sin_colat, lat_weights, cos_tab, sin_tab, rings, lmax } = &self.layout
        else {
            unreachable!()
        };
        let (nlat, nlon, lmax) = (*nlat, *nlon, *lmax);
        let dphi = 2.0 * PI / nlon as f64;
        // analysis: ring Fourier sums, then Legendre projection
        let mut ca = vec![0.0; lm_index(lmax, lmax) + 1];
        let mut cb = vec![0.0; lm_index(lmax, lmax) + 1];
        for i in 0..nlat {
            let row = &values[i * nlon..(i + 1) * nlon];
            let ring = &rings[i];
            for m in 0..=lmax {
                let ct = &cos_tab[m * nlon..(m + 1) * nlon];
                let st = &sin_tab[m * nlon..(m + 1) * nlon];
                let (mut am, mut bm) = (0.0, 0.0);
                for j in 0..nlon {
                    am += row[j] * ct[j];
                    bm += row[j] * st[j];
                }
                let norm = if m == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
                let wq = lat_weights[i] * dphi * norm;
                for l in m..=lmax {
                    let p = ring.p[lm_index(l, m)];
                    ca[lm_index(l, m)] += wq * p * am;
                    cb[lm_index(l, m)] += wq * p * bm;
                }
            }
        }
        let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let floor = NOISE_FLOOR * scale * (4.0 * PI).sqrt();
        for c in ca.iter_mut().chain(cb.iter_mut()) {
            if c.abs() <= floor {
                *c = 0.0;
            }
        }
        let n = self.len();
        let mut smooth = Vec::with_capacity(n);
        let mut gradient = Vec::with_capacity(n);
        let mut hessian = Vec::with_capacity(n);
        // Pointwise synthesis mismatch misses the zonal part (Gauss rules
        // interpolate in latitude), so the top third of the spectrum is added.
        let mut high: f64 = 0.0;
        for l in (2 * lmax / 3 + 1)..=lmax {
            let sup = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
            for m in 0..=l {
                let k = lm_index(l, m);
                let norm = if m == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
                high += norm * sup * ca[k].hypot(cb[k]);
            }
        }
        let mut tail: f64 = 0.0;
        let mut amp = vec![[0.0; 6]; lmax + 1];
        for i in 0..nlat {
            let ring = &rings[i];
            let (zi, s) = (z[i], sin_colat[i]);
            for m in 0..=lmax {
                let norm = if m == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
                let mut acc = [0.0; 6];
                for l in m..=lmax {
                    let k = lm_index(l, m);
                    let (a, b) = (ca[k], cb[k]);
                    acc[0] += a * ring.p[k];
                    acc[1] += b * ring.p[k];
                    acc[2] += a * ring.dp[k];
                    acc[3] += b * ring.dp[k];
                    acc[4] += a * ring.d2p[k];
                    acc[5] += b * ring.d2p[k];
                }
                for v in acc.iter_mut() {
                    *v *= norm;
                }
                amp[m] = acc;
            }
            for j in 0..nlon {
                let (mut f, mut ft, mut ftt, mut fp, mut fpp, mut ftp) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for m in 0..=lmax {
                    let (c, sn) = (cos_tab[m * nlon + j], sin_tab[m * nlon + j]);
                    let mf = m as f64;
                    let [a, b, at, bt, att, btt] = amp[m];
                    f += a * c + b * sn;
                    ft += at * c + bt * sn;
                    ftt += att * c + btt * sn;
                    fp += mf * (-a * sn + b * c);
                    fpp += -mf * mf * (a * c + b * sn);
                    ftp += mf * (-at * sn + bt * c);
                }
                tail = tail.max((f - values[i * nlon + j]).abs());
                smooth.push(f);
                gradient.push(DVector::from_vec(vec![ft, fp / s]));
                let h01 = ftp / s - zi * fp / (s * s);
                let h11 = fpp / (s * s) + zi / s * ft;
                hessian.push(DMatrix::from_row_slice(2, 2, &[ftt, h01, h01, h11]));
            }
        }
        let residual = if scale > 0.0 { tail.max(high) / scale } else { 0.0 };
        Derivatives { values: smooth, gradient, hessian, residual }
    }
}

/// L²-orthonormal real spherical harmonic on S^2: `order >= 0` selects the
/// cosine type, `order < 0` the sine type of order `|order|`.
pub fn real_harmonic(degree: usize, order: i64, theta: &DVector<f64>) -> f64 {
    let m = order.unsigned_abs() as usize;
    assert!(m <= degree, "order exceeds degree");
    let z = theta[2].clamp(-1.0, 1.0);
    let s = (theta[0] * theta[0] + theta[1] * theta[1]).sqrt();
    let phi = theta[1].atan2(theta[0]);
    let p = normalized_legendre(degree, m, z, s);
    if m == 0 {
        p
    } else if order > 0 {
        std::f64::consts::SQRT_2 * p * (m as f64 * phi).cos()
    } else {
        std::f64::consts::SQRT_2 * p * (m as f64 * phi).sin()
    }
}

fn normalized_legendre(l: usize, m: usize, z: f64, s: f64) -> f64 {
    let mut pmm = 1.0 / (4.0 * PI).sqrt();
    for k in 1..=m {
        let kf = k as f64;
        pmm *= ((2.0 * kf + 1.0) / (2.0 * kf)).sqrt() * s;
    }
    if l == m {
        return pmm;
    }
    let mut prev = pmm;
    let mut cur = (2.0 * m as f64 + 3.0).sqrt() * z * pmm;
    for ll in (m + 2)..=l {
        let (lf, mf) = (ll as f64, m as f64);
        let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
        let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
        let next = a * (z * cur - b * prev);
        prev = cur;
        cur = next;
    }
    cur
}

fn circle_derivatives(m: usize, values: &[f64]) -> Derivatives {
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut spec: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut spec);
    let scale = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut tail = 0.0;
    let mut d0 = vec![Complex64::new(0.0, 0.0); m];
    let mut d1 = vec![Complex64::new(0.0, 0.0); m];
    let mut d2 = vec![Complex64::new(0.0, 0.0); m];
    // coefficients at roundoff level would only be amplified by differentiation
    let floor = NOISE_FLOOR * scale * m as f64;
    for (idx, c) in spec.iter().enumerate() {
        let k = if idx <= m / 2 { idx as i64 } else { idx as i64 - m as i64 };
        let ka = k.unsigned_abs() as usize;
        if 3 * ka > m {
            tail += c.norm() / m as f64;
        }
        if 2 * ka == m || c.norm() <= floor {
            continue;
        }
        let kf = k as f64;
        d0[idx] = *c;
        d1[idx] = c * Complex64::new(0.0, kf);
        d2[idx] = c * (-kf * kf);
    }
    inv.process(&mut d0);
    inv.process(&mut d1);
    inv.process(&mut d2);
    let inv_m = 1.0 / m as f64;
    let smooth = d0.iter().map(|c| c.re * inv_m).collect();
    let gradient = d1.iter().map(|c| DVector::from_element(1, c.re * inv_m)).collect();
    let hessian = d2.iter().map(|c| DMatrix::from_element(1, 1, c.re * inv_m)).collect();
    let residual = if scale > 0.0 { tail / scale } else { 0.0 };
    Derivatives { values: smooth, gradient, hessian, residual }
}

fn circle_basis(phi: &[f64], degree: usize) -> HarmonicBasis {
    let mut labels = vec![BasisLabel { degree: 0, order: 0, sine: false }];
    for k in 1..=degree {
        labels.push(BasisLabel { degree: k, order: k, sine: false });
        labels.push(BasisLabel { degree: k, order: k, sine: true });
    }
    let n = phi.len();
    let nb = labels.len();
    let mut values = DMatrix::zeros(n, nb);
    let mut grad = DMatrix::zeros(n, nb);
    let c0 = 1.0 / (2.0 * PI).sqrt();
    let ck = 1.0 / PI.sqrt();
    for (a, &p) in phi.iter().enumerate() {
        for (k, lab) in labels.iter().enumerate() {
            if lab.degree == 0 {
                values[(a, k)] = c0;
                continue;
            }
            let kf = lab.order as f64;
            let (s, c) = (kf * p).sin_cos();
            if lab.sine {
                values[(a, k)] = ck * s;
                grad[(a, k)] = ck * kf * c;
            } else {
                values[(a, k)] = ck * c;
                grad[(a, k)] = -ck * kf * s;
            }
        }
    }
    HarmonicBasis { degree, labels, values, gradients: vec![grad] }
}

/// Random band-limited function: i.i.d. standard normal coefficients on the
/// basis functions of the requested parity (or all), optionally without the
/// constant term.
pub fn random_band_limited(
    grid: &SphereGrid,
    basis: &HarmonicBasis,
    parity: Option<Parity>,
    with_constant: bool,
    rng: &mut impl rand::Rng,
) -> ScalarField {
    let coeffs: Vec<f64> = basis
        .labels
        .iter()
        .map(|lab| {
            let z: f64 = rng.sample(StandardNormal);
            let keep = parity.is_none_or(|p| lab.parity() == p) && (with_constant || lab.degree > 0);
            if keep {
                // mild decay keeps the field comfortably resolved
                z / (1.0 + lab.degree as f64)
            } else {
                0.0
            }
        })
        .collect();
    basis.synthesize(grid, &coeffs)
}

//! Galerkin discretization of `-Delta_K` in `L^2(V_K)`, its spectrum with
//! parity labels, and the Bochner and local Brunn–Minkowski checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{hess_star, CentroAffineFrame};
use crate::sphere::{BasisLabel, HarmonicBasis, Parity, ScalarField};

/// Relative clustering threshold for eigenvalue multiplicities.
pub const DEFAULT_CLUSTER_TOL: f64 = 1e-6;
/// Largest allowed change of a reported eigenvalue under `L -> L + 4`.
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-4;
/// Degree increment of the refinement comparison.
pub const REFINEMENT_STEP: usize = 4;

/// Stiffness and mass matrices in a harmonic basis.
#[derive(Debug, Clone)]
pub struct OperatorSystem {
    pub dim: usize,
    pub degree: usize,
    pub labels: Vec<BasisLabel>,
    /// `A_ij = int <grad phi_i, grad phi_j>_g dV_K`
    pub stiffness: DMatrix<f64>,
    /// `M_ij = int phi_i phi_j dV_K`
    pub mass: DMatrix<f64>,
    pub basis: HarmonicBasis,
}

impl OperatorSystem {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices_of(&self, parity: Parity) -> Vec<usize> {
        self.basis.indices_of(parity)
    }

    /// Largest `|A_ij|`, `|M_ij|` between functions of opposite parity.
    pub fn parity_leak(&self) -> f64 {
        let even = self.indices_of(Parity::Even);
        let odd = self.indices_of(Parity::Odd);
        let mut worst: f64 = 0.0;
        for &i in &even {
            for &j in &odd {
                worst = worst.max(self.stiffness[(i, j)].abs()).max(self.mass[(i, j)].abs());
            }
        }
        worst
    }
}

/// Per-node weights `w_a * dV_K/dm`.
fn volume_weights(frame: &CentroAffineFrame) -> Vec<f64> {
    let w = frame.grid().weights();
    frame.cone_volume_density().iter().zip(w).map(|(d, w)| d * w).collect()
}

fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

fn scale_rows(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (r, &f) in s.iter().enumerate() {
        out.row_mut(r).scale_mut(f);
    }
    out
}

/// Galerkin blocks restricted to the basis columns `idx`.
fn assemble_block(frame: &CentroAffineFrame, basis: &HarmonicBasis, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = frame.grid().tangent_dim();
    let vw = volume_weights(frame);
    let phi = select_columns(&basis.values, idx);
    let mass = phi.transpose() * scale_rows(&phi, &vw);
    let grads: Vec<DMatrix<f64>> = basis.gradients.iter().map(|g| select_columns(g, idx)).collect();
    let mut stiff = DMatrix::zeros(idx.len(), idx.len());
    for i in 0..d {
        for j in i..d {
            let s: Vec<f64> = vw.iter().enumerate().map(|(a, v)| v * frame.g_inv[a][(i, j)]).collect();
            let term = grads[i].transpose() * scale_rows(&grads[j], &s);
            if i == j {
                stiff += term;
            } else {
                stiff += &term + term.transpose();
            }
        }
    }
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    (sym(stiff), sym(mass))
}

/// Assemble the Galerkin system for basis degree `degree`.
pub fn assemble(frame: &CentroAffineFrame, degree: usize) -> Result<OperatorSystem> {
    let grid = frame.grid();
    if 2 * degree > grid.degree() {
        return Err(Error::BasisExceedsGrid { degree, needed: 2 * degree, available: grid.degree() });
    }
    let basis = grid.harmonic_basis(degree)?;
    let all: Vec<usize> = (0..basis.len()).collect();
    let (stiffness, mass) = assemble_block(frame, &basis, &all);
    Ok(OperatorSystem { dim: grid.dim(), degree, labels: basis.labels.clone(), stiffness, mass, basis })
}

/// Which basis block to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParityFilter {
    All,
    Even,
}

#[derive(Debug, Clone, Serialize)]
pub struct Eigenpair {
    pub value: f64,
    pub parity: Parity,
    pub residual: f64,
    /// Changed by less than the convergence tolerance under `L -> L + 4`;
    /// `false` when no comparison was made.
    pub converged: bool,
}

/// Spectrum of `-Delta_K` in ascending order.
#[derive(Debug, Clone)]
pub struct SpectralResult {
    pub dim: usize,
    pub degree: usize,
    pub filter: ParityFilter,
    pub pairs: Vec<Eigenpair>,
    /// M-orthonormal coefficient vectors in the full basis (columns match `pairs`).
    pub eigenvectors: DMatrix<f64>,
    pub lambda1: f64,
    pub lambda1_multiplicity: usize,
    pub lambda1_cluster_diameter: f64,
    pub lambda1_even: Option<f64>,
    /// `lambda1` and `lambda1_even` stable under `L -> L + 4`.
    pub converged: bool,
    /// Largest change of `lambda1`, `lambda1_even` under refinement.
    pub refinement_change: Option<f64>,
}

impl SpectralResult {
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.value).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.pairs.iter().map(|p| p.residual).fold(0.0, f64::max)
    }

    /// Values of the eigenfunction `k` on the grid.
    pub fn eigenfunction(&self, system: &OperatorSystem, k: usize) -> Vec<f64> {
        (&system.basis.values * self.eigenvectors.column(k)).iter().copied().collect()
    }
}

struct BlockSpectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    residuals: Vec<f64>,
}

/// Symmetric-definite generalized eigenproblem `A v = lambda M v` via Cholesky of `M`.
fn solve_block(a: &DMatrix<f64>, m: &DMatrix<f64>, degree: usize) -> Result<BlockSpectrum> {
    let chol = m.clone().cholesky().ok_or(Error::Factorization { degree })?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or(Error::Factorization { degree })?;
    let c = &linv * a * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let lt_inv = linv.transpose();
    let mut values = Vec::with_capacity(order.len());
    let mut vectors = DMatrix::zeros(a.nrows(), order.len());
    let mut residuals = Vec::with_capacity(order.len());
    for (col, &k) in order.iter().enumerate() {
        let lam = eig.eigenvalues[k];
        let v = &lt_inv * eig.eigenvectors.column(k);
        let mv = m * &v;
        let r = a * &v - &mv * lam;
        residuals.push(r.norm() / mv.norm());
        vectors.set_column(col, &v);
        values.push(lam);
    }
    Ok(BlockSpectrum { values, vectors, residuals })
}

fn sub_matrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

/// Solve the assembled system. The convergence flag is left unset; see
/// [`spectrum`] for the refined variant.
pub fn solve(system: &OperatorSystem, filter: ParityFilter) -> Result<SpectralResult> {
    solve_with_tolerance(system, filter, DEFAULT_CLUSTER_TOL)
}

pub fn solve_with_tolerance(system: &OperatorSystem, filter: ParityFilter, cluster_tol: f64) -> Result<SpectralResult> {
    let parities: &[Parity] = match filter {
        ParityFilter::All => &[Parity::Even, Parity::Odd],
        ParityFilter::Even => &[Parity::Even],
    };
    let nb = system.len();
    let mut entries: Vec<(f64, Parity, f64, DVector<f64>)> = Vec::new();
    let mut lambda1_even = None;
    for &par in parities {
        let idx = system.indices_of(par);
        if idx.is_empty() {
            continue;
        }
        let block = solve_block(&sub_matrix(&system.stiffness, &idx), &sub_matrix(&system.mass, &idx), system.degree)?;
        if par == Parity::Even {
            lambda1_even = block.values.get(1).copied();
        }
        for k in 0..block.values.len() {
            let mut full = DVector::zeros(nb);
            for (r, &i) in idx.iter().enumerate() {
                full[i] = block.vectors[(r, k)];
            }
            entries.push((block.values[k], par, block.residuals[k], full));
        }
    }
    entries.sort_by(|x, y| x.0.total_cmp(&y.0));
    // the constant is the single kernel function: drop the lowest even value
    let zero = entries.iter().position(|e| e.1 == Parity::Even).unwrap_or(0);
    let nonzero: Vec<f64> = entries.iter().enumerate().filter(|(i, _)| *i != zero).map(|(_, e)| e.0).collect();
    let lambda1 = nonzero.first().copied().unwrap_or(f64::NAN);
    let cluster: Vec<f64> =
        nonzero.iter().copied().filter(|v| (v - lambda1).abs() <= cluster_tol * lambda1.abs().max(1.0)).collect();
    let diameter = cluster.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lambda1;
    let mut eigenvectors = DMatrix::zeros(nb, entries.len());
    let mut pairs = Vec::with_capacity(entries.len());
    for (c, (value, parity, residual, v)) in entries.into_iter().enumerate() {
        eigenvectors.set_column(c, &v);
        pairs.push(Eigenpair { value, parity, residual, converged: false });
    }
    Ok(SpectralResult {
        dim: system.dim,
        degree: system.degree,
        filter,
        pairs,
        eigenvectors,
        lambda1,
        lambda1_multiplicity: cluster.len(),
        lambda1_cluster_diameter: diameter.max(0.0),
        lambda1_even,
        converged: false,
        refinement_change: None,
    })
}

/// Assemble and solve at `degree`, then compare against `degree + 4` to set
/// the convergence flags. When the grid cannot carry the refined basis the
/// result is reported unconverged.
pub fn spectrum(frame: &CentroAffineFrame, degree: usize, filter: ParityFilter) -> Result<(OperatorSystem, SpectralResult)> {
    let system = assemble(frame, degree)?;
    let mut result = solve(&system, filter)?;
    let finer = match assemble(frame, degree + REFINEMENT_STEP) {
        Ok(s) => Some(solve(&s, filter)?),
        Err(Error::BasisExceedsGrid { .. }) => None,
        Err(e) => return Err(e),
    };
    if let Some(fine) = finer {
        for par in [Parity::Even, Parity::Odd] {
            let coarse: Vec<usize> = (0..result.pairs.len()).filter(|&k| result.pairs[k].parity == par).collect();
            let fine_vals: Vec<f64> = fine.pairs.iter().filter(|p| p.parity == par).map(|p| p.value).collect();
            for (rank, &k) in coarse.iter().enumerate() {
                result.pairs[k].converged =
                    (result.pairs[k].value - fine_vals[rank]).abs() < DEFAULT_CONVERGENCE_TOL;
            }
        }
        let mut change = (result.lambda1 - fine.lambda1).abs();
        if let (Some(a), Some(b)) = (result.lambda1_even, fine.lambda1_even) {
            change = change.max((a - b).abs());
        }
        result.refinement_change = Some(change);
        result.converged = change < DEFAULT_CONVERGENCE_TOL;
    }
    Ok((system, result))
}

fn weighted_sum(weights: &[f64], values: impl Iterator<Item = f64>) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

/// `Delta_K f = (D2h^{-1})^{ij} [nabla^2(f h) + f h delta]_{ij} - (n - 1) f`.
pub fn hbm_apply(frame: &CentroAffineFrame, f: &ScalarField) -> Result<ScalarField> {
    let grid = frame.grid();
    let fh = f.zip_with(&frame.field.h, |a, b| a * b)?;
    let der = grid.differentiate(&fh)?;
    let n = grid.dim() as f64;
    let mut out = Vec::with_capacity(grid.len());
    for a in 0..grid.len() {
        let d2h_inv = &frame.g_inv[a] / frame.field.h.values[a];
        let mut m = der.hessian[a].clone();
        for i in 0..m.nrows() {
            m[(i, i)] += fh.values[a];
        }
        out.push(d2h_inv.component_mul(&m).sum() - (n - 1.0) * f.values[a]);
    }
    ScalarField::new(grid, out)
}

/// `int f g dV_K`.
pub fn inner_product(frame: &CentroAffineFrame, f: &ScalarField, g: &ScalarField) -> Result<f64> {
    frame.grid().check(f)?;
    frame.grid().check(g)?;
    let vw = volume_weights(frame);
    Ok(weighted_sum(&vw, f.values.iter().zip(&g.values).map(|(a, b)| a * b)))
}

/// `int <grad f, grad g>_{g_K} dV_K`.
pub fn dirichlet_form(frame: &CentroAffineFrame, f: &ScalarField, g: &ScalarField) -> Result<f64> {
    let grid = frame.grid();
    let df = grid.differentiate(f)?;
    let dg = grid.differentiate(g)?;
    let vw = volume_weights(frame);
    Ok(weighted_sum(
        &vw,
        (0..grid.len()).map(|a| (df.gradient[a].transpose() * &frame.g_inv[a] * &dg.gradient[a])[0]),
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BochnerReport {
    /// `int (Delta_K f)^2 dV_K`
    pub lhs: f64,
    /// `int |Hess* f|_g^2 + (n - 2) |grad f|_g^2 dV_K`
    pub rhs: f64,
    pub relative_gap: f64,
}

pub fn bochner_check(frame: &CentroAffineFrame, f: &ScalarField) -> Result<BochnerReport> {
    let n = frame.dim() as f64;
    let lap = hbm_apply(frame, f)?;
    let hs = hess_star(frame, f)?;
    let vw = volume_weights(frame);
    let lhs = weighted_sum(&vw, lap.values.iter().map(|v| v * v));
    let rhs = weighted_sum(
        &vw,
        (0..frame.len()).map(|a| {
            let gi = &frame.g_inv[a];
            let t = &hs.tensor[a];
            let hess2 = (gi * t * gi * t).trace();
            let grad2 = (hs.gradient[a].transpose() * gi * &hs.gradient[a])[0];
            hess2 + (n - 2.0) * grad2
        }),
    );
    let scale = lhs.abs().max(rhs.abs());
    let relative_gap = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
    Ok(BochnerReport { lhs, rhs, relative_gap })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LocalBmReport {
    pub quotient: f64,
    /// `quotient - (n - 1)`
    pub margin: f64,
}

/// Rayleigh quotient of `f` minus its `V_K`-mean.
pub fn local_bm_check(frame: &CentroAffineFrame, f: &ScalarField) -> Result<LocalBmReport> {
    let grid = frame.grid();
    grid.check(f)?;
    let vw = volume_weights(frame);
    let vol: f64 = vw.iter().sum();
    let mean = weighted_sum(&vw, f.values.iter().copied()) / vol;
    let centred = f.map(|v| v - mean);
    let norm2 = weighted_sum(&vw, centred.values.iter().map(|v| v * v));
    let raw2 = weighted_sum(&vw, f.values.iter().map(|v| v * v));
    if norm2 <= 1e-24 * raw2.max(f64::MIN_POSITIVE) || norm2 == 0.0 {
        return Err(Error::InvalidArgument("function is constant after removing its mean".into()));
    }
    let energy = dirichlet_form(frame, &centred, &centred)?;
    let quotient = energy / norm2;
    Ok(LocalBmReport { quotient, margin: quotient - (frame.dim() as f64 - 1.0) })
}

/// The equality functions `<theta / h, v>` of the local Brunn–Minkowski inequality.
pub fn linear_conormal_function(frame: &CentroAffineFrame, v: &DVector<f64>) -> ScalarField {
    let vals = frame.xi_star.iter().map(|x| x.dot(v)).collect();
    ScalarField::new(frame.grid(), vals).expect("grid length")
}

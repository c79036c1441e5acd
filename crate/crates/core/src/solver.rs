//! Complex electro-quasistatic solver on the voxel grid.
//!
//! Discretizes `div((sigma + j*w*eps) grad(phi)) = 0` with a finite-volume
//! 7-point stencil. Face admittivities are harmonic means of the adjacent
//! voxel admittivities, which stays correct for piecewise-constant
//! coefficients across large contrast (air vs muscle spans ~3 orders of
//! magnitude in |admittivity| at 21 MHz). Electrode and ground-plane
//! voxels are Dirichlet anchors folded into the right-hand side; outer
//! domain faces are zero-normal-current.

use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::phantom::{Label, VoxelGrid};
use crate::tissue::{TissueError, TissueTable};

/// Default relative residual target for the iterative solver.
pub const DEFAULT_TOL_REL: f64 = 1e-8;
/// Unknown-count guard for the direct factorization oracle.
pub const DENSE_ORACLE_MAX_UNKNOWNS: usize = 20_000;
/// Band-storage guard for the direct oracle (number of complex entries).
const BAND_ENTRY_CAP: usize = 80_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    /// Incomplete LU factorization with zero fill-in (default).
    Ilu0,
    /// Diagonal scaling.
    Jacobi,
}

impl Preconditioner {
    pub fn name(&self) -> &'static str {
        match self {
            Preconditioner::Ilu0 => "ilu0",
            Preconditioner::Jacobi => "jacobi",
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    MissingTissue(#[from] TissueError),
    #[error("grid has no ground-plane voxels")]
    NoGroundPlane,
    #[error("grid is missing electrode voxels (need both plates)")]
    NoElectrodes,
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "iterative solver did not reach tolerance {tol_rel:e} in {max_iter} iterations (residual {residual:e})"
    )]
    NoConvergence {
        tol_rel: f64,
        max_iter: usize,
        residual: f64,
        /// Partial result, flagged `converged = false`, so sweep drivers
        /// can skip and log instead of aborting.
        partial: Box<PotentialField>,
    },
    #[error("linear system is singular (no usable Dirichlet anchor)")]
    SingularSystem,
    #[error("system too large for the direct oracle: {unknowns} unknowns (cap {cap})")]
    SystemTooLarge { unknowns: usize, cap: usize },
    #[error("field and system were produced from different grids or excitations")]
    MismatchedInputs,
    #[error("field file format error: {0}")]
    BadFieldFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Assembled sparse system: CSR matrix over non-Dirichlet voxels plus the
/// Dirichlet-eliminated right-hand side. Read-only after assembly.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    grid: Arc<VoxelGrid>,
    n: usize,
    indptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<Complex64>,
    b: Vec<Complex64>,
    unknown_of_voxel: Vec<i32>,
    voxel_of_unknown: Vec<u32>,
    /// Every internal face (a < b) with its admittance Y = harm(y_a, y_b) * h.
    faces: Vec<(u32, u32, Complex64)>,
    v_tx: f64,
    frequency_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
    pub restarts: usize,
}

/// Complex scalar potential per voxel, with Dirichlet values filled in.
#[derive(Debug, Clone)]
pub struct PotentialField {
    grid: Arc<VoxelGrid>,
    pub phi: Vec<Complex64>,
    pub v_tx: f64,
    pub stats: SolveStats,
}

impl PotentialField {
    pub fn grid(&self) -> &Arc<VoxelGrid> {
        &self.grid
    }

    pub fn phi_at(&self, idx: usize) -> Complex64 {
        self.phi[idx]
    }
}

/// Per-voxel net complex current and the electrode/ground totals.
#[derive(Debug, Clone)]
pub struct DivergenceMap {
    /// Net current into each voxel from its faces (A). Zero for a
    /// perfectly converged interior voxel.
    pub net: Vec<Complex64>,
    /// Current injected into the domain by the positive electrode set.
    pub electrode_pos_current: Complex64,
    /// Current injected by the negative electrode set.
    pub electrode_neg_current: Complex64,
    /// Current injected by the ground plane (return-path leakage).
    pub ground_current: Complex64,
    pub max_interior_divergence: f64,
    /// Scale for interpreting divergences: ||b|| of the assembled system.
    pub rhs_norm: f64,
}

impl LinearSystem {
    pub fn n_unknowns(&self) -> usize {
        self.n
    }

    pub fn grid(&self) -> &Arc<VoxelGrid> {
        &self.grid
    }

    pub fn v_tx(&self) -> f64 {
        self.v_tx
    }

    pub fn frequency_hz(&self) -> f64 {
        self.frequency_hz
    }

    pub fn rhs(&self) -> &[Complex64] {
        &self.b
    }

    pub fn rhs_norm(&self) -> f64 {
        norm(&self.b)
    }

    pub fn unknown_of_voxel(&self, idx: usize) -> Option<usize> {
        let u = self.unknown_of_voxel[idx];
        (u >= 0).then_some(u as usize)
    }

    pub fn voxel_of_unknown(&self, row: usize) -> usize {
        self.voxel_of_unknown[row] as usize
    }

    /// Row entries (columns and values) of unknown `row`.
    pub fn row(&self, row: usize) -> (&[u32], &[Complex64]) {
        let lo = self.indptr[row];
        let hi = self.indptr[row + 1];
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    pub fn dirichlet_value(&self, label: Label) -> Option<Complex64> {
        match label {
            Label::ElectrodePos => Some(Complex64::new(self.v_tx / 2.0, 0.0)),
            Label::ElectrodeNeg => Some(Complex64::new(-self.v_tx / 2.0, 0.0)),
            Label::GroundPlane => Some(Complex64::new(0.0, 0.0)),
            _ => None,
        }
    }

    /// y = A x.
    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            y.par_iter_mut().enumerate().for_each(|(row, out)| {
                let lo = self.indptr[row];
                let hi = self.indptr[row + 1];
                let mut acc = Complex64::new(0.0, 0.0);
                for pos in lo..hi {
                    acc += self.vals[pos] * x[self.cols[pos] as usize];
                }
                *out = acc;
            });
        }
        #[cfg(not(feature = "parallel"))]
        {
            for (row, out) in y.iter_mut().enumerate() {
                let lo = self.indptr[row];
                let hi = self.indptr[row + 1];
                let mut acc = Complex64::new(0.0, 0.0);
                for pos in lo..hi {
                    acc += self.vals[pos] * x[self.cols[pos] as usize];
                }
                *out = acc;
            }
        }
    }

    /// Expand an unknown vector to a per-voxel field with Dirichlet values.
    fn field_from_unknowns(&self, x: &[Complex64], stats: SolveStats) -> PotentialField {
        let mut phi = vec![Complex64::new(0.0, 0.0); self.grid.num_voxels()];
        for (u, &vox) in self.voxel_of_unknown.iter().enumerate() {
            phi[vox as usize] = x[u];
        }
        for (idx, p) in phi.iter_mut().enumerate() {
            if let Some(v) = self.dirichlet_value(self.grid.label_at(idx)) {
                *p = v;
            }
        }
        PotentialField {
            grid: Arc::clone(&self.grid),
            phi,
            v_tx: self.v_tx,
            stats,
        }
    }
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn dot_conj(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        acc += x.conj() * y;
    }
    acc
}

/// Assemble the finite-volume system for the labeled grid.
///
/// Face admittance between voxels a and b is `2*y_a*y_b/(y_a+y_b) * h`
/// (harmonic mean times face-area/spacing = h). Dirichlet voxels couple
/// with the admittivity of the material they occupy: electrodes use the
/// tissue they displaced, the earth slab couples through the medium it
/// sits in. Outer faces carry no current.
pub fn assemble(
    grid: &Arc<VoxelGrid>,
    table: &TissueTable,
    frequency_hz: f64,
    v_tx: f64,
) -> Result<LinearSystem, SolverError> {
    let counts = grid.counts();
    if counts[Label::GroundPlane as usize] == 0 {
        return Err(SolverError::NoGroundPlane);
    }
    if counts[Label::ElectrodePos as usize] == 0 || counts[Label::ElectrodeNeg as usize] == 0 {
        return Err(SolverError::NoElectrodes);
    }
    if !frequency_hz.is_finite() || frequency_hz < 0.0 {
        return Err(SolverError::InvalidParameter(format!(
            "frequency_hz must be finite and non-negative, got {frequency_hz}"
        )));
    }
    if !v_tx.is_finite() {
        return Err(SolverError::InvalidParameter("v_tx must be finite".into()));
    }

    // Resolve every tissue the grid references up-front.
    let mut y_cache: std::collections::BTreeMap<&'static str, Complex64> =
        std::collections::BTreeMap::new();
    let n_vox = grid.num_voxels();
    let mut y_voxel = vec![Complex64::new(0.0, 0.0); n_vox];
    for (idx, slot) in y_voxel.iter_mut().enumerate() {
        let name = grid.material_tissue_of(idx);
        let y = match y_cache.get(name) {
            Some(&y) => y,
            None => {
                let y = table.admittivity_at(name, frequency_hz)?.as_complex();
                y_cache.insert(name, y);
                y
            }
        };
        *slot = y;
    }

    let h = grid.resolution_m; // face area / spacing for a cubic cell
    let face_y = |a: usize, b: usize| -> Complex64 {
        let ya = y_voxel[a];
        let yb = y_voxel[b];
        let denom = ya + yb;
        if denom.norm_sqr() == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            2.0 * ya * yb / denom * h
        }
    };

    let [nx, ny, nz] = grid.dims;
    let mut unknown_of_voxel = vec![-1i32; n_vox];
    let mut voxel_of_unknown = Vec::with_capacity(n_vox);
    for idx in 0..n_vox {
        if !grid.label_at(idx).is_dirichlet() {
            unknown_of_voxel[idx] = voxel_of_unknown.len() as i32;
            voxel_of_unknown.push(idx as u32);
        }
    }
    let n = voxel_of_unknown.len();
    if n == 0 {
        return Err(SolverError::InvalidParameter(
            "grid has no non-Dirichlet voxels".into(),
        ));
    }

    let dirichlet_value = |label: Label| -> Option<Complex64> {
        match label {
            Label::ElectrodePos => Some(Complex64::new(v_tx / 2.0, 0.0)),
            Label::ElectrodeNeg => Some(Complex64::new(-v_tx / 2.0, 0.0)),
            Label::GroundPlane => Some(Complex64::new(0.0, 0.0)),
            _ => None,
        }
    };

    let mut faces = Vec::with_capacity(3 * n_vox);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = grid.index(i, j, k);
                if i + 1 < nx {
                    faces.push((idx as u32, (idx + 1) as u32, face_y(idx, idx + 1)));
                }
                if j + 1 < ny {
                    faces.push((idx as u32, (idx + nx) as u32, face_y(idx, idx + nx)));
                }
                if k + 1 < nz {
                    faces.push((idx as u32, (idx + nx * ny) as u32, face_y(idx, idx + nx * ny)));
                }
            }
        }
    }

    // CSR rows in unknown order; neighbor scan in -z,-y,-x,+x,+y,+z order
    // produces sorted column indices because unknown ids are voxel-ordered.
    let mut indptr = Vec::with_capacity(n + 1);
    let mut cols: Vec<u32> = Vec::with_capacity(7 * n);
    let mut vals: Vec<Complex64> = Vec::with_capacity(7 * n);
    let mut b = vec![Complex64::new(0.0, 0.0); n];
    indptr.push(0);
    for &vox in &voxel_of_unknown {
        let idx = vox as usize;
        let [i, j, k] = grid.coords_of(idx);
        let row = unknown_of_voxel[idx] as usize;
        let mut diag = Complex64::new(0.0, 0.0);
        let mut lower: [(u32, Complex64); 3] = [(0, Complex64::new(0.0, 0.0)); 3];
        let mut upper: [(u32, Complex64); 3] = [(0, Complex64::new(0.0, 0.0)); 3];
        let mut n_lower = 0usize;
        let mut n_upper = 0usize;
        {
            let mut visit = |nidx: usize| {
                let y = face_y(idx, nidx);
                diag += y;
                let nl = grid.label_at(nidx);
                if let Some(v) = dirichlet_value(nl) {
                    b[row] += y * v;
                } else {
                    let u = unknown_of_voxel[nidx];
                    debug_assert!(u >= 0);
                    if (u as usize) < row {
                        lower[n_lower] = (u as u32, -y);
                        n_lower += 1;
                    } else {
                        upper[n_upper] = (u as u32, -y);
                        n_upper += 1;
                    }
                }
            };
            if k > 0 {
                visit(idx - nx * ny);
            }
            if j > 0 {
                visit(idx - nx);
            }
            if i > 0 {
                visit(idx - 1);
            }
            if i + 1 < nx {
                visit(idx + 1);
            }
            if j + 1 < ny {
                visit(idx + nx);
            }
            if k + 1 < nz {
                visit(idx + nx * ny);
            }
        }
        for (c, v) in lower.iter().take(n_lower) {
            cols.push(*c);
            vals.push(*v);
        }
        cols.push(row as u32);
        vals.push(diag);
        for (c, v) in upper.iter().take(n_upper) {
            cols.push(*c);
            vals.push(*v);
        }
        indptr.push(cols.len());
    }

    Ok(LinearSystem {
        grid: Arc::clone(grid),
        n,
        indptr,
        cols,
        vals,
        b,
        unknown_of_voxel,
        voxel_of_unknown,
        faces,
        v_tx,
        frequency_hz,
    })
}

/// ILU(0) factors stored on the CSR pattern of A.
struct Ilu0 {
    indptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<Complex64>,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    fn factor(sys: &LinearSystem) -> Ilu0 {
        let n = sys.n;
        let indptr = sys.indptr.clone();
        let cols = sys.cols.clone();
        let mut vals = sys.vals.clone();
        let mut diag_pos = vec![0usize; n];
        for i in 0..n {
            for pos in indptr[i]..indptr[i + 1] {
                if cols[pos] as usize == i {
                    diag_pos[i] = pos;
                }
            }
        }
        for i in 0..n {
            let row_lo = indptr[i];
            let row_hi = indptr[i + 1];
            for pos_ik in row_lo..row_hi {
                let k = cols[pos_ik] as usize;
                if k >= i {
                    break;
                }
                let piv = vals[diag_pos[k]];
                let lik = if piv.norm_sqr() > 0.0 {
                    vals[pos_ik] / piv
                } else {
                    Complex64::new(0.0, 0.0)
                };
                vals[pos_ik] = lik;
                if lik.norm_sqr() == 0.0 {
                    continue;
                }
                for pos_kj in (diag_pos[k] + 1)..indptr[k + 1] {
                    let j = cols[pos_kj];
                    let lo = indptr[i];
                    let hi = indptr[i + 1];
                    if let Ok(p) = cols[lo..hi].binary_search(&j) {
                        let update = lik * vals[pos_kj];
                        vals[lo + p] -= update;
                    }
                }
            }
        }
        Ilu0 {
            indptr,
            cols,
            vals,
            diag_pos,
        }
    }

    /// z = U^-1 L^-1 x.
    fn apply(&self, x: &[Complex64], z: &mut [Complex64]) {
        let n = x.len();
        // forward solve, unit lower triangle
        for i in 0..n {
            let mut acc = x[i];
            for pos in self.indptr[i]..self.diag_pos[i] {
                acc -= self.vals[pos] * z[self.cols[pos] as usize];
            }
            z[i] = acc;
        }
        // backward solve
        for i in (0..n).rev() {
            let mut acc = z[i];
            for pos in (self.diag_pos[i] + 1)..self.indptr[i + 1] {
                acc -= self.vals[pos] * z[self.cols[pos] as usize];
            }
            let d = self.vals[self.diag_pos[i]];
            z[i] = if d.norm_sqr() > 0.0 { acc / d } else { acc };
        }
    }
}

enum Precond {
    Ilu(Ilu0),
    Jacobi(Vec<Complex64>),
}

impl Precond {
    fn apply(&self, x: &[Complex64], z: &mut [Complex64]) {
        match self {
            Precond::Ilu(ilu) => ilu.apply(x, z),
            Precond::Jacobi(inv_diag) => {
                for ((zi, xi), di) in z.iter_mut().zip(x).zip(inv_diag) {
                    *zi = xi * di;
                }
            }
        }
    }
}

/// Solve with ILU(0)-preconditioned BiCGStab (see [`solve_with`]).
pub fn solve(
    system: &LinearSystem,
    tol_rel: f64,
    max_iter: usize,
) -> Result<PotentialField, SolverError> {
    solve_with(system, tol_rel, max_iter, Preconditioner::Ilu0)
}

/// Preconditioned BiCGStab to a relative residual `tol_rel`.
///
/// Deterministic: fixed zero initial guess, sequential reductions, no
/// randomization. The reported residual is the true relative residual
/// `||b - A x|| / ||b||`, re-verified whenever the recurrence residual
/// claims convergence; on disagreement the iteration restarts from the
/// true residual.
pub fn solve_with(
    system: &LinearSystem,
    tol_rel: f64,
    max_iter: usize,
    precond: Preconditioner,
) -> Result<PotentialField, SolverError> {
    if !(tol_rel > 0.0 && tol_rel <= 1e-2) {
        return Err(SolverError::InvalidParameter(format!(
            "tol_rel must be in (0, 1e-2], got {tol_rel}"
        )));
    }
    if max_iter < 1 {
        return Err(SolverError::InvalidParameter(
            "max_iter must be at least 1".into(),
        ));
    }
    let n = system.n;
    let b_norm = system.rhs_norm();
    if b_norm == 0.0 {
        // zero excitation: phi = 0 exactly
        let stats = SolveStats {
            iterations: 0,
            rel_residual: 0.0,
            converged: true,
            restarts: 0,
        };
        return Ok(system.field_from_unknowns(&vec![Complex64::new(0.0, 0.0); n], stats));
    }

    let pc = match precond {
        Preconditioner::Ilu0 => Precond::Ilu(Ilu0::factor(system)),
        Preconditioner::Jacobi => {
            let mut inv = vec![Complex64::new(1.0, 0.0); n];
            for (i, slot) in inv.iter_mut().enumerate() {
                let (cols, vals) = system.row(i);
                for (c, v) in cols.iter().zip(vals) {
                    if *c as usize == i && v.norm_sqr() > 0.0 {
                        *slot = 1.0 / v;
                    }
                }
            }
            Precond::Jacobi(inv)
        }
    };

    let zero = Complex64::new(0.0, 0.0);
    let one = Complex64::new(1.0, 0.0);
    let mut x = vec![zero; n];
    let mut r = system.b.clone();
    let mut rhat = r.clone();
    let mut p = vec![zero; n];
    let mut v = vec![zero; n];
    let mut phat = vec![zero; n];
    let mut shat = vec![zero; n];
    let mut t = vec![zero; n];
    let mut scratch = vec![zero; n];
    let mut rho = one;
    let mut alpha = one;
    let mut omega = one;
    let mut iterations = 0usize;
    let mut restarts = 0usize;
    const MAX_RESTARTS: usize = 8;
    let breakdown = 1e-290;

    macro_rules! true_rel {
        () => {{
            system.matvec(&x, &mut scratch);
            let mut acc = 0.0;
            for (bi, axi) in system.b.iter().zip(scratch.iter()) {
                acc += (bi - axi).norm_sqr();
            }
            acc.sqrt() / b_norm
        }};
    }
    macro_rules! restart {
        () => {{
            restarts += 1;
            if restarts > MAX_RESTARTS {
                break;
            }
            system.matvec(&x, &mut scratch);
            for i in 0..n {
                r[i] = system.b[i] - scratch[i];
            }
            rhat.copy_from_slice(&r);
            rho = one;
            alpha = one;
            omega = one;
            p.iter_mut().for_each(|c| *c = zero);
            v.iter_mut().for_each(|c| *c = zero);
            continue;
        }};
    }

    while iterations < max_iter {
        let rho_new = dot_conj(&rhat, &r);
        if rho_new.norm() < breakdown {
            if true_rel!() <= tol_rel {
                break;
            }
            restart!();
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pc.apply(&p, &mut phat);
        system.matvec(&phat, &mut v);
        let denom = dot_conj(&rhat, &v);
        if denom.norm() < breakdown {
            restart!();
        }
        alpha = rho_new / denom;
        // s overwrites r
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        iterations += 1;
        if norm(&r) / b_norm <= tol_rel {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            if true_rel!() <= tol_rel {
                break;
            }
            restart!();
        }
        pc.apply(&r, &mut shat);
        system.matvec(&shat, &mut t);
        let tt = dot_conj(&t, &t);
        if tt.norm() < breakdown {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            restart!();
        }
        omega = dot_conj(&t, &r) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
        }
        for i in 0..n {
            r[i] -= omega * t[i];
        }
        rho = rho_new;
        if norm(&r) / b_norm <= tol_rel {
            if true_rel!() <= tol_rel {
                break;
            }
            restart!();
        }
        if omega.norm() < breakdown {
            restart!();
        }
    }

    system.matvec(&x, &mut scratch);
    let mut acc = 0.0;
    for (bi, axi) in system.b.iter().zip(scratch.iter()) {
        acc += (bi - axi).norm_sqr();
    }
    let rel = acc.sqrt() / b_norm;
    let converged = rel <= tol_rel;
    let stats = SolveStats {
        iterations,
        rel_residual: rel,
        converged,
        restarts,
    };
    let field = system.field_from_unknowns(&x, stats);
    if converged {
        Ok(field)
    } else {
        Err(SolverError::NoConvergence {
            tol_rel,
            max_iter,
            residual: rel,
            partial: Box::new(field),
        })
    }
}

/// Direct banded-LU reference solve, used only for verification.
///
/// LU without pivoting on the band; the assembled stencil is
/// (quasi-)diagonally dominant, and tests that use the oracle also verify
/// its residual.
pub fn solve_dense_oracle(system: &LinearSystem) -> Result<PotentialField, SolverError> {
    let n = system.n;
    if n > DENSE_ORACLE_MAX_UNKNOWNS {
        return Err(SolverError::SystemTooLarge {
            unknowns: n,
            cap: DENSE_ORACLE_MAX_UNKNOWNS,
        });
    }
    let mut hb = 0usize;
    for i in 0..n {
        let (cols, _) = system.row(i);
        for &c in cols {
            hb = hb.max((c as isize - i as isize).unsigned_abs());
        }
    }
    let width = 2 * hb + 1;
    let entries = n.checked_mul(width).filter(|&e| e <= BAND_ENTRY_CAP).ok_or(
        SolverError::SystemTooLarge {
            unknowns: n,
            cap: DENSE_ORACLE_MAX_UNKNOWNS,
        },
    )?;
    let zero = Complex64::new(0.0, 0.0);
    let mut band = vec![zero; entries];
    let at = |r: usize, c: usize| -> usize { r * width + (c + hb - r) };
    let mut diag_scale = 0.0f64;
    for i in 0..n {
        let (cols, vals) = system.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            band[at(i, c as usize)] = v;
            if c as usize == i {
                diag_scale = diag_scale.max(v.norm());
            }
        }
    }
    if diag_scale == 0.0 {
        return Err(SolverError::SingularSystem);
    }
    let pivot_floor = diag_scale * 1e-14;

    for k in 0..n {
        let piv = band[at(k, k)];
        if piv.norm() <= pivot_floor {
            return Err(SolverError::SingularSystem);
        }
        let r_hi = (k + hb).min(n - 1);
        for r in (k + 1)..=r_hi {
            let m = band[at(r, k)] / piv;
            band[at(r, k)] = m;
            if m.norm_sqr() == 0.0 {
                continue;
            }
            for c in (k + 1)..=r_hi {
                let u = band[at(k, c)];
                if u.norm_sqr() != 0.0 {
                    let delta = m * u;
                    band[at(r, c)] -= delta;
                }
            }
        }
    }

    let mut x = system.b.clone();
    // forward: L has unit diagonal
    for i in 0..n {
        let lo = i.saturating_sub(hb);
        let mut acc = x[i];
        for c in lo..i {
            acc -= band[at(i, c)] * x[c];
        }
        x[i] = acc;
    }
    // backward
    for i in (0..n).rev() {
        let hi = (i + hb).min(n - 1);
        let mut acc = x[i];
        for c in (i + 1)..=hi {
            acc -= band[at(i, c)] * x[c];
        }
        x[i] = acc / band[at(i, i)];
    }

    let mut ax = vec![zero; n];
    system.matvec(&x, &mut ax);
    let mut rsq = 0.0;
    for (bi, axi) in system.b.iter().zip(&ax) {
        rsq += (bi - axi).norm_sqr();
    }
    let b_norm = system.rhs_norm();
    let rel = if b_norm > 0.0 { rsq.sqrt() / b_norm } else { 0.0 };
    let stats = SolveStats {
        iterations: 0,
        rel_residual: rel,
        converged: true,
        restarts: 0,
    };
    Ok(system.field_from_unknowns(&x, stats))
}

/// Net complex current per voxel plus electrode/ground totals, the
/// discrete charge-conservation check for a solved field.
pub fn current_divergence(
    field: &PotentialField,
    system: &LinearSystem,
) -> Result<DivergenceMap, SolverError> {
    let same_grid = Arc::ptr_eq(&field.grid, &system.grid)
        || (field.grid.dims == system.grid.dims
            && field.grid.resolution_m == system.grid.resolution_m);
    if !same_grid || field.phi.len() != system.grid.num_voxels() || field.v_tx != system.v_tx {
        return Err(SolverError::MismatchedInputs);
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut net = vec![zero; field.phi.len()];
    for &(a, b, y) in &system.faces {
        let ia = a as usize;
        let ib = b as usize;
        let flow = y * (field.phi[ib] - field.phi[ia]); // current into a from b
        net[ia] += flow;
        net[ib] -= flow;
    }
    let mut pos = zero;
    let mut neg = zero;
    let mut ground = zero;
    let mut max_interior = 0.0f64;
    for (idx, &d) in net.iter().enumerate() {
        match field.grid.label_at(idx) {
            // injected current = -(net inflow) for a source voxel
            Label::ElectrodePos => pos -= d,
            Label::ElectrodeNeg => neg -= d,
            Label::GroundPlane => ground -= d,
            _ => max_interior = max_interior.max(d.norm()),
        }
    }
    Ok(DivergenceMap {
        net,
        electrode_pos_current: pos,
        electrode_neg_current: neg,
        ground_current: ground,
        max_interior_divergence: max_interior,
        rhs_norm: system.rhs_norm(),
    })
}

/// Dump the complex field as a text header plus little-endian f64 pairs.
pub fn write_field<W: Write>(field: &PotentialField, mut w: W) -> Result<(), SolverError> {
    let g = &field.grid;
    writeln!(w, "bodychan field v1")?;
    writeln!(w, "dims {} {} {}", g.dims[0], g.dims[1], g.dims[2])?;
    writeln!(w, "resolution_m {}", g.resolution_m)?;
    let o = g.origin_m();
    writeln!(w, "origin_m {} {} {}", o[0], o[1], o[2])?;
    writeln!(w, "v_tx {}", field.v_tx)?;
    writeln!(w)?;
    let mut bytes = Vec::with_capacity(field.phi.len() * 16);
    for c in &field.phi {
        bytes.extend_from_slice(&c.re.to_le_bytes());
        bytes.extend_from_slice(&c.im.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Read back a field dump: (dims, v_tx, phi). The grid itself is not part
/// of the dump format.
pub fn read_field<R: Read>(r: R) -> Result<([usize; 3], f64, Vec<Complex64>), SolverError> {
    let mut reader = std::io::BufReader::new(r);
    let mut line = String::new();
    let mut dims = None;
    let mut v_tx = None;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(SolverError::BadFieldFile("unexpected end of header".into()));
        }
        let t = line.trim_end();
        if t.is_empty() {
            break;
        }
        let mut parts = t.split_whitespace();
        match parts.next() {
            Some("bodychan") => {}
            Some("dims") => {
                let v: Vec<usize> = parts.filter_map(|p| p.parse().ok()).collect();
                if v.len() != 3 {
                    return Err(SolverError::BadFieldFile("bad dims".into()));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            Some("v_tx") => v_tx = parts.next().and_then(|p| p.parse().ok()),
            Some("resolution_m") | Some("origin_m") => {}
            _ => return Err(SolverError::BadFieldFile(format!("unknown header '{t}'"))),
        }
    }
    let dims = dims.ok_or_else(|| SolverError::BadFieldFile("missing dims".into()))?;
    let v_tx = v_tx.ok_or_else(|| SolverError::BadFieldFile("missing v_tx".into()))?;
    let total = dims[0] * dims[1] * dims[2];
    let mut bytes = vec![0u8; total * 16];
    reader.read_exact(&mut bytes)?;
    let phi = bytes
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[0..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            )
        })
        .collect();
    Ok((dims, v_tx, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Label, VoxelGrid};
    use crate::tissue::{self, TissueTable};
    use approx::assert_relative_eq;

    fn table() -> TissueTable {
        TissueTable::builtin()
    }

    /// All-muscle box with a 1-voxel +/- electrode pair along `axis` at
    /// the center and a ground-plane bottom slab.
    fn dipole_grid(dims: [usize; 3], axis: usize) -> Arc<VoxelGrid> {
        let n = dims[0] * dims[1] * dims[2];
        let mut labels = vec![Label::Muscle; n];
        let nx = dims[0];
        let ny = dims[1];
        for j in 0..ny {
            for i in 0..nx {
                labels[i + nx * j] = Label::GroundPlane;
            }
        }
        let mut grid = VoxelGrid::from_labels(dims, 0.01, 0.0, labels);
        let c = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let mut neg = c;
        neg[axis] -= 1;
        grid.set_label(c[0], c[1], c[2], Label::ElectrodePos);
        grid.set_label(neg[0], neg[1], neg[2], Label::ElectrodeNeg);
        Arc::new(grid)
    }

    /// 1D chain: Neg, Ground, M, M, M, Pos along x.
    fn chain_grid() -> Arc<VoxelGrid> {
        let labels = vec![
            Label::ElectrodeNeg,
            Label::GroundPlane,
            Label::Muscle,
            Label::Muscle,
            Label::Muscle,
            Label::ElectrodePos,
        ];
        Arc::new(VoxelGrid::from_labels([6, 1, 1], 0.01, 0.0, labels))
    }

    #[test]
    fn chain_linear_potential_drop() {
        let grid = chain_grid();
        let sys = assemble(&grid, &table(), 21e6, 2.0).unwrap();
        assert_eq!(sys.n_unknowns(), 3);
        let field = solve_dense_oracle(&sys).unwrap();
        // unknowns sit between ground (0) and the positive plate (+1)
        assert_relative_eq!(field.phi[2].re, 0.25, max_relative = 1e-12);
        assert_relative_eq!(field.phi[3].re, 0.50, max_relative = 1e-12);
        assert_relative_eq!(field.phi[4].re, 0.75, max_relative = 1e-12);
        let it = solve(&sys, 1e-10, 100).unwrap();
        for v in 2..5 {
            assert_relative_eq!(it.phi[v].re, field.phi[v].re, max_relative = 1e-8);
        }
    }

    #[test]
    fn interior_rows_sum_to_zero() {
        let grid = dipole_grid([8, 8, 8], 2);
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let mut checked = 0;
        for row in 0..sys.n_unknowns() {
            let vox = sys.voxel_of_unknown(row);
            let [i, j, k] = grid.coords_of(vox);
            if i == 0 || j == 0 || k <= 1 || i == 7 || j == 7 || k == 7 {
                continue;
            }
            let near_dirichlet = [
                grid.label(i + 1, j, k),
                grid.label(i - 1, j, k),
                grid.label(i, j + 1, k),
                grid.label(i, j - 1, k),
                grid.label(i, j, k + 1),
                grid.label(i, j, k - 1),
            ]
            .iter()
            .any(|l| l.is_dirichlet());
            if near_dirichlet {
                continue;
            }
            let (cols, vals) = sys.row(row);
            let sum: Complex64 = vals.iter().sum();
            let diag = vals[cols.iter().position(|&c| c as usize == row).unwrap()];
            assert!(
                sum.norm() <= 1e-12 * diag.norm(),
                "interior row {row} does not sum to zero: {sum:?}"
            );
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn face_coupling_is_harmonic_mean() {
        // muscle next to air at 21 MHz: coupling follows the small air term
        let table = table();
        let f = 21e6;
        let y_air = table.admittivity_at("air", f).unwrap().as_complex();
        let y_mus = table.admittivity_at("muscle", f).unwrap().as_complex();
        let h = 0.01;
        let harm = 2.0 * y_air * y_mus / (y_air + y_mus) * h;
        let limit = 2.0 * y_air * h;
        assert!(
            (harm - limit).norm() / limit.norm() < 5e-3,
            "air-dominated face coupling should approach 2*y_air*h"
        );

        // the assembled off-diagonal matches the harmonic-mean formula
        let mut labels = vec![Label::Muscle; 8 * 8 * 8];
        for j in 0..8 {
            for i in 0..8 {
                labels[i + 8 * j] = Label::GroundPlane;
            }
        }
        for idx in (8 * 8 * 4)..(8 * 8 * 8) {
            labels[idx] = Label::Air;
        }
        let mut grid = VoxelGrid::from_labels([8, 8, 8], h, 0.0, labels);
        grid.set_label(3, 3, 2, Label::ElectrodePos);
        grid.set_label(4, 3, 2, Label::ElectrodeNeg);
        let grid = Arc::new(grid);
        let sys = assemble(&grid, &table, f, 1.0).unwrap();
        let vox = grid.index(2, 3, 3); // muscle
        let nvox = grid.index(2, 3, 4); // air above
        let row = sys.unknown_of_voxel(vox).unwrap();
        let col = sys.unknown_of_voxel(nvox).unwrap() as u32;
        let (cols, vals) = sys.row(row);
        let pos = cols.iter().position(|&c| c == col).unwrap();
        let expected = -(2.0 * y_air * y_mus / (y_air + y_mus) * h);
        assert_relative_eq!(vals[pos].re, expected.re, max_relative = 1e-14);
        assert_relative_eq!(vals[pos].im, expected.im, max_relative = 1e-14);
    }

    #[test]
    fn zero_excitation_gives_zero_field() {
        let grid = dipole_grid([8, 8, 8], 2);
        let sys = assemble(&grid, &table(), 21e6, 0.0).unwrap();
        let field = solve(&sys, 1e-8, 100).unwrap();
        assert!(field.stats.converged);
        assert_eq!(field.stats.iterations, 0);
        assert!(field.phi.iter().all(|c| c.norm() == 0.0));
        let div = current_divergence(&field, &sys).unwrap();
        assert_eq!(div.max_interior_divergence, 0.0);
    }

    #[test]
    fn doubling_vtx_doubles_field() {
        let grid = dipole_grid([10, 10, 10], 2);
        let s1 = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let s2 = assemble(&grid, &table(), 21e6, 2.0).unwrap();
        let f1 = solve(&s1, 1e-10, 2000).unwrap();
        let f2 = solve(&s2, 1e-10, 2000).unwrap();
        let scale = f1.phi.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        for (a, b) in f1.phi.iter().zip(&f2.phi) {
            assert!(
                (2.0 * a - b).norm() <= 1e-8 * scale * 2.0,
                "doubling v_tx must double phi"
            );
        }
    }

    #[test]
    fn iterative_matches_direct_oracle() {
        // 16x16x32 toy grid for the dense-equivalence check
        let grid = dipole_grid([16, 16, 32], 2);
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let direct = solve_dense_oracle(&sys).unwrap();
        assert!(direct.stats.rel_residual < 1e-10, "oracle residual check");
        let iter = solve(&sys, 1e-9, 5000).unwrap();
        let scale = direct.phi.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        let mut max_rel = 0.0f64;
        for (a, b) in iter.phi.iter().zip(&direct.phi) {
            max_rel = max_rel.max((a - b).norm() / scale);
        }
        assert!(
            max_rel <= 1e-6,
            "iterative vs direct max relative error {max_rel:e} exceeds 1e-6"
        );
    }

    #[test]
    fn jacobi_preconditioner_also_converges() {
        let grid = dipole_grid([12, 12, 12], 2);
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let f = solve_with(&sys, 1e-8, 20000, Preconditioner::Jacobi).unwrap();
        assert!(f.stats.converged);
    }

    #[test]
    fn singular_system_detected() {
        let grid = dipole_grid([8, 8, 8], 2);
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let mut broken = sys.clone();
        for v in broken.vals.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
        assert!(matches!(
            solve_dense_oracle(&broken),
            Err(SolverError::SingularSystem)
        ));
    }

    #[test]
    fn oracle_rejects_oversized_systems() {
        let grid = dipole_grid([30, 30, 30], 2); // ~27k unknowns
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        assert!(matches!(
            solve_dense_oracle(&sys),
            Err(SolverError::SystemTooLarge { .. })
        ));
    }

    #[test]
    fn missing_tissue_reported() {
        let grid = dipole_grid([8, 8, 8], 2);
        let t = tissue::load_tissue_table("skin,21e6,0.3,200\n").unwrap();
        assert!(matches!(
            assemble(&grid, &t, 21e6, 1.0),
            Err(SolverError::MissingTissue(_))
        ));
    }

    #[test]
    fn preconditions_checked() {
        let mut labels = vec![Label::Muscle; 512];
        labels[0] = Label::ElectrodePos;
        labels[1] = Label::ElectrodeNeg;
        let grid = Arc::new(VoxelGrid::from_labels([8, 8, 8], 0.01, 0.0, labels));
        assert!(matches!(
            assemble(&grid, &table(), 21e6, 1.0),
            Err(SolverError::NoGroundPlane)
        ));

        let mut labels = vec![Label::Muscle; 512];
        for l in labels.iter_mut().take(64) {
            *l = Label::GroundPlane;
        }
        let grid = Arc::new(VoxelGrid::from_labels([8, 8, 8], 0.01, 0.0, labels));
        assert!(matches!(
            assemble(&grid, &table(), 21e6, 1.0),
            Err(SolverError::NoElectrodes)
        ));

        let grid = dipole_grid([8, 8, 8], 2);
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        assert!(matches!(
            solve(&sys, 0.5, 100),
            Err(SolverError::InvalidParameter(_))
        ));
        assert!(matches!(
            solve(&sys, 1e-8, 0),
            Err(SolverError::InvalidParameter(_))
        ));
    }

    #[test]
    fn no_convergence_returns_flagged_partial() {
        let grid = dipole_grid([16, 16, 16], 2);
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        match solve_with(&sys, 1e-10, 2, Preconditioner::Jacobi) {
            Err(SolverError::NoConvergence { partial, .. }) => {
                assert!(!partial.stats.converged);
                assert!(partial.stats.rel_residual > 1e-10);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn conservation_on_toy_grid() {
        let grid = dipole_grid([12, 12, 16], 2);
        let tol = 1e-10;
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let field = solve(&sys, tol, 10000).unwrap();
        let div = current_divergence(&field, &sys).unwrap();
        assert!(
            div.max_interior_divergence <= 10.0 * tol * div.rhs_norm,
            "interior divergence {:e} above 10*tol*||b|| = {:e}",
            div.max_interior_divergence,
            10.0 * tol * div.rhs_norm
        );
        let total = div.electrode_pos_current + div.electrode_neg_current + div.ground_current;
        let scale = div.electrode_pos_current.norm();
        assert!(
            total.norm() <= 1e-6 * scale,
            "electrode/ground current balance {:e} above 1e-6 relative",
            total.norm() / scale
        );
    }

    #[test]
    fn divergence_requires_matching_inputs() {
        let grid_a = dipole_grid([8, 8, 8], 2);
        let grid_b = dipole_grid([10, 10, 10], 2);
        let sys_a = assemble(&grid_a, &table(), 21e6, 1.0).unwrap();
        let sys_b = assemble(&grid_b, &table(), 21e6, 1.0).unwrap();
        let f = solve(&sys_a, 1e-8, 1000).unwrap();
        assert!(matches!(
            current_divergence(&f, &sys_b),
            Err(SolverError::MismatchedInputs)
        ));
    }

    #[test]
    fn linearity_in_excitation() {
        let grid = dipole_grid([10, 10, 12], 2);
        let base = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let f_base = solve(&base, 1e-10, 5000).unwrap();
        let scale0 = f_base.phi.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        for alpha in [-1.0f64, 2.0, 10.0] {
            let sys = assemble(&grid, &table(), 21e6, alpha).unwrap();
            let f = solve(&sys, 1e-10, 5000).unwrap();
            for (a, b) in f_base.phi.iter().zip(&f.phi) {
                assert!(
                    (alpha * a - b).norm() <= 1e-8 * scale0 * alpha.abs().max(1.0),
                    "alpha-scaling failed for alpha = {alpha}"
                );
            }
        }
    }

    #[test]
    fn reciprocity_of_transfer_impedance() {
        // drive pair A, sense open-circuit voltage at pair B; then swap.
        // Z_t = V_sense / I_drive must match within 1%. Both pairs are
        // x-pairs straddling the box midplane, so the +/- plate
        // environments mirror exactly and no common-mode current flows to
        // ground; what remains is the (voxel/distance)^3 perturbation of
        // pinning a plate voxel.
        let dims = [20, 20, 20];
        let n = dims[0] * dims[1] * dims[2];
        let base: Vec<Label> = (0..n)
            .map(|idx| {
                if idx < dims[0] * dims[1] {
                    Label::GroundPlane
                } else {
                    Label::Muscle
                }
            })
            .collect();
        let a_pos = [10usize, 10, 6];
        let a_neg = [9usize, 10, 6];
        let b_pos = [10usize, 6, 13];
        let b_neg = [9usize, 6, 13];
        let t = table();

        let drive = |p: [usize; 3], m: [usize; 3]| -> (Complex64, Complex64, Complex64) {
            let mut grid = VoxelGrid::from_labels(dims, 0.01, 0.0, base.clone());
            grid.set_label(p[0], p[1], p[2], Label::ElectrodePos);
            grid.set_label(m[0], m[1], m[2], Label::ElectrodeNeg);
            let grid = Arc::new(grid);
            let sys = assemble(&grid, &t, 21e6, 1.0).unwrap();
            let f = solve(&sys, 1e-11, 20000).unwrap();
            let div = current_divergence(&f, &sys).unwrap();
            let phi = |c: [usize; 3]| f.phi[grid.index(c[0], c[1], c[2])];
            (
                div.electrode_pos_current,
                phi(b_pos) - phi(b_neg),
                phi(a_pos) - phi(a_neg),
            )
        };

        let (i_a, v_b, _) = drive(a_pos, a_neg);
        let (i_b, _, v_a) = drive(b_pos, b_neg);
        let z_ab = v_b / i_a;
        let z_ba = v_a / i_b;
        let rel = (z_ab - z_ba).norm() / z_ab.norm();
        assert!(rel < 0.01, "reciprocity violated: {rel:e}");
    }

    #[test]
    fn mirror_symmetry_of_field() {
        // symmetric scene; dipole axis in the mirror plane x = 0 gives a
        // symmetric phi, axis normal to the plane gives antisymmetric phi.
        let dims = [14, 12, 12];
        let n = dims[0] * dims[1] * dims[2];
        let base: Vec<Label> = (0..n)
            .map(|idx| {
                if idx < dims[0] * dims[1] {
                    Label::GroundPlane
                } else {
                    Label::Muscle
                }
            })
            .collect();
        let t = table();

        let mut grid = VoxelGrid::from_labels(dims, 0.01, 0.0, base.clone());
        grid.set_label(6, 6, 7, Label::ElectrodePos);
        grid.set_label(7, 6, 7, Label::ElectrodePos);
        grid.set_label(6, 6, 5, Label::ElectrodeNeg);
        grid.set_label(7, 6, 5, Label::ElectrodeNeg);
        let grid = Arc::new(grid);
        let sys = assemble(&grid, &t, 21e6, 1.0).unwrap();
        let f = solve(&sys, 1e-11, 20000).unwrap();
        let scale = f.phi.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let a = f.phi[grid.index(i, j, k)];
                    let b = f.phi[grid.index(dims[0] - 1 - i, j, k)];
                    assert!(
                        (a - b).norm() <= 1e-9 * scale,
                        "in-plane axis: field must mirror"
                    );
                }
            }
        }

        let mut grid = VoxelGrid::from_labels(dims, 0.01, 0.0, base);
        grid.set_label(7, 6, 6, Label::ElectrodePos);
        grid.set_label(6, 6, 6, Label::ElectrodeNeg);
        let grid = Arc::new(grid);
        let sys = assemble(&grid, &t, 21e6, 1.0).unwrap();
        let f = solve(&sys, 1e-11, 20000).unwrap();
        let scale = f.phi.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let a = f.phi[grid.index(i, j, k)];
                    let b = f.phi[grid.index(dims[0] - 1 - i, j, k)];
                    assert!(
                        (a + b).norm() <= 1e-9 * scale,
                        "normal axis: field must be antisymmetric"
                    );
                }
            }
        }
    }

    #[test]
    fn refinement_probe_voltage_is_cauchy() {
        // same physical scene rasterized at three resolutions; the probe
        // voltage differences must shrink (Cauchy behavior).
        let t = table();
        let mut probes = Vec::new();
        for (nc, res) in [(12usize, 0.04f64), (24, 0.02), (48, 0.01)] {
            let n = nc * nc * nc;
            let mut labels = vec![Label::Muscle; n];
            for j in 0..nc {
                for i in 0..nc {
                    labels[i + nc * j] = Label::GroundPlane;
                }
            }
            let mut grid = VoxelGrid::from_labels([nc, nc, nc], res, 0.0, labels);
            let at = |p: [f64; 3], g: &VoxelGrid| g.voxel_containing(p).unwrap();
            let gp = at([0.005, 0.005, 0.245], &grid);
            let gm = at([0.005, 0.005, 0.205], &grid);
            grid.set_label(gp[0], gp[1], gp[2], Label::ElectrodePos);
            grid.set_label(gm[0], gm[1], gm[2], Label::ElectrodeNeg);
            let grid = Arc::new(grid);
            let sys = assemble(&grid, &t, 21e6, 1.0).unwrap();
            let f = solve(&sys, 1e-10, 30000).unwrap();
            let pa = at([0.125, 0.005, 0.325], &grid);
            let pb = at([0.125, 0.005, 0.125], &grid);
            let v =
                f.phi[grid.index(pa[0], pa[1], pa[2])] - f.phi[grid.index(pb[0], pb[1], pb[2])];
            probes.push(v);
        }
        let d1 = (probes[1] - probes[0]).norm();
        let d2 = (probes[2] - probes[1]).norm();
        assert!(
            d2 < d1,
            "refinement deltas must decrease: |d1| = {d1:e}, |d2| = {d2:e}"
        );
    }

    #[test]
    fn field_dump_round_trips() {
        let grid = dipole_grid([8, 8, 8], 2);
        let sys = assemble(&grid, &table(), 21e6, 1.0).unwrap();
        let f = solve(&sys, 1e-8, 1000).unwrap();
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        let (dims, v_tx, phi) = read_field(buf.as_slice()).unwrap();
        assert_eq!(dims, grid.dims);
        assert_eq!(v_tx, 1.0);
        assert_eq!(phi, f.phi);
    }
}

//! Metric-driven (LOD) approximation spaces: correctors in the kernel of the
//! coarse L²-projection, localized to element patches, and reduced models on
//! the span of the corrected coarse hat functions.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::{pcg, solve_checked, CgSettings, LinearOperator, PrecondKind, SolveReport};
use crate::chol::{nested_dissection, FactorPrecond, SparseCholesky};
use crate::error::{invalid, Error, Result};
use crate::field::{Flavor, Layout};
use crate::mesh::{Mesh, Rect};
use crate::models::{
    EnergyModel, FemModel, MetricOperator, ModelKind, QuarticPencil,
};
use crate::solvers::{solve_ground_state, GroundState, SolverConfig};
use crate::space::{FeSpace, NOT_INTERIOR};
use crate::sparse::{Csr, SparseSym};
use crate::vecops::{axpy, dot, norm2};

/// Nested coarse P1 / fine P1-or-P2 pair on the same rectangle.
pub struct TwoLevelMesh {
    coarse: Arc<FeSpace>,
    fine: Arc<FeSpace>,
    /// Fine interior × coarse interior: coarse hats evaluated at fine DOFs.
    prolongation: Csr,
    /// Coarse interior × fine interior: Pᵀ M_f.
    constraint: Csr,
    /// Fine lattice units per coarse cell.
    ratio: usize,
}

impl TwoLevelMesh {
    pub fn new(rect: Rect, n_coarse: usize, n_fine: usize, fine_order: usize) -> Result<Self> {
        if n_coarse == 0 || n_fine % n_coarse != 0 || !(n_fine / n_coarse).is_power_of_two() {
            return invalid(format!(
                "fine mesh {n_fine} is not a power-of-two refinement of coarse mesh {n_coarse}"
            ));
        }
        let coarse = Arc::new(FeSpace::new(Mesh::new(rect, n_coarse, n_coarse)?, 1)?);
        let fine = Arc::new(FeSpace::new(Mesh::new(rect, n_fine, n_fine)?, fine_order)?);
        Self::from_spaces(coarse, fine)
    }

    pub fn from_spaces(coarse: Arc<FeSpace>, fine: Arc<FeSpace>) -> Result<Self> {
        let (cm, fm) = (coarse.mesh(), fine.mesh());
        if coarse.order() != 1 {
            return invalid("coarse space must be P1");
        }
        if cm.rect() != fm.rect()
            || fm.nx() % cm.nx() != 0
            || fm.ny() % cm.ny() != 0
            || fm.nx() / cm.nx() != fm.ny() / cm.ny()
            || !(fm.nx() / cm.nx()).is_power_of_two()
        {
            return invalid("meshes are not nested");
        }
        let ratio = fine.order() * fm.nx() / cm.nx();
        let c_int = coarse.full_to_interior();
        let mut trip = Vec::new();
        for (k, &d) in fine.interior_dofs().iter().enumerate() {
            let x = fine.dof_coords()[d];
            let (t, bary) = cm
                .locate(x)
                .ok_or_else(|| Error::InvalidInput(format!("fine DOF at {x:?} outside coarse mesh")))?;
            for (a, &v) in coarse.elem_dofs(t).iter().enumerate() {
                let ci = c_int[v];
                if ci != NOT_INTERIOR && bary[a].abs() > 1e-14 {
                    trip.push((k, ci as usize, bary[a]));
                }
            }
        }
        let prolongation = Csr::from_triplets(fine.n_interior(), coarse.n_interior(), trip);
        let constraint = fine.mass().matmul(&prolongation).transpose();
        Ok(Self {
            coarse,
            fine,
            prolongation,
            constraint,
            ratio,
        })
    }

    pub fn coarse(&self) -> &Arc<FeSpace> {
        &self.coarse
    }

    pub fn fine(&self) -> &Arc<FeSpace> {
        &self.fine
    }

    pub fn prolongation(&self) -> &Csr {
        &self.prolongation
    }

    /// Pᵀ M_f; a fine function w lies in W = ker(P_H) iff this maps it to zero.
    pub fn constraint(&self) -> &Csr {
        &self.constraint
    }

    /// Coarse cell side length.
    pub fn coarse_h(&self) -> f64 {
        self.coarse.mesh().hx()
    }

    pub fn prolong(&self, coarse: &[f64]) -> Vec<f64> {
        self.prolongation.matvec(coarse)
    }

    /// L²-projection of a fine scalar function onto the coarse interior space.
    pub fn l2_project(&self, fine: &[f64]) -> Result<Vec<f64>> {
        if fine.len() != self.fine.n_interior() {
            return invalid("fine vector has wrong length");
        }
        let rhs = self.constraint.matvec(fine);
        if norm2(&rhs) == 0.0 {
            return Ok(vec![0.0; rhs.len()]);
        }
        let settings = CgSettings {
            tol: 1e-14,
            max_iter: None,
            precond: PrecondKind::Jacobi,
        };
        Ok(solve_checked(self.coarse.mass(), &rhs, None, &settings, "coarse L² projection")?.0)
    }
}

/// ℓ = ceil(|log₂(H/diam)|), at least 1.
pub fn default_layers(h: f64, diam: f64) -> usize {
    ((h / diam).log2().abs() - 1e-9).ceil().max(1.0) as usize
}

/// Fine unknowns and active constraints of one corrector problem.
#[derive(Debug, Clone)]
pub struct Patch {
    /// Fine interior indices strictly inside the patch rectangle.
    pub fine: Vec<usize>,
    /// Coarse interior vertices whose hats meet the patch.
    pub constraints: Vec<usize>,
}

/// Patch of `layers` coarse cell layers around supp φ_z (`None`: whole domain).
pub fn patch(tl: &TwoLevelMesh, z: usize, layers: Option<usize>) -> Patch {
    let (nx, ny) = (tl.coarse.mesh().nx(), tl.coarse.mesh().ny());
    let vz = tl.coarse.interior_dofs()[z];
    let [iz, jz] = tl.coarse.lattice()[vz];
    let (i0, i1, j0, j1) = match layers {
        None => (0, nx, 0, ny),
        Some(l) => (
            iz.saturating_sub(l + 1),
            (iz + l + 1).min(nx),
            jz.saturating_sub(l + 1),
            (jz + l + 1).min(ny),
        ),
    };
    let r = tl.ratio;
    let fine = tl
        .fine
        .interior_dofs()
        .iter()
        .enumerate()
        .filter(|(_, &d)| {
            let [a, b] = tl.fine.lattice()[d];
            a > i0 * r && a < i1 * r && b > j0 * r && b < j1 * r
        })
        .map(|(k, _)| k)
        .collect();
    let constraints = tl
        .coarse
        .interior_dofs()
        .iter()
        .enumerate()
        .filter(|(_, &d)| {
            let [a, b] = tl.coarse.lattice()[d];
            a >= i0 && a <= i1 && b >= j0 && b <= j1
        })
        .map(|(k, _)| k)
        .collect();
    Patch { fine, constraints }
}

/// Projected CG settings for corrector problems.
#[derive(Debug, Clone, Copy)]
pub struct CorrectorSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CorrectorSettings {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 5000,
        }
    }
}

/// Euclidean projector onto ker(C) for a short, wide C.
struct KernelProjector {
    c: Csr,
    ct: Csr,
    gram: Cholesky<f64, nalgebra::Dyn>,
}

impl KernelProjector {
    fn new(c: Csr) -> Result<Self> {
        let ct = c.transpose();
        let g = c.matmul(&ct).to_dense();
        let gram = Cholesky::new(g)
            .ok_or_else(|| Error::Indefinite("constraint Gram matrix is singular".into()))?;
        Ok(Self { c, ct, gram })
    }

    fn apply(&self, v: &mut [f64]) {
        if self.c.nrows() == 0 {
            return;
        }
        let cv = DVector::from_vec(self.c.matvec(v));
        let y = self.gram.solve(&cv);
        let corr = self.ct.matvec(y.as_slice());
        axpy(-1.0, &corr, v);
    }
}

/// Corrector 𝒞v on a patch: the A-orthogonal projection of v onto W ∩ V_h(patch).
/// Returns (patch fine indices, values) and the CG report.
fn corrector_on_patch(
    tl: &TwoLevelMesh,
    a: &SparseSym,
    v: &[f64],
    p: &Patch,
    settings: &CorrectorSettings,
) -> Result<(Vec<f64>, SolveReport)> {
    corrector_on_indices(a, &tl.constraint, v, &p.fine, &p.constraints, settings)
}

/// Same as [`corrector_on_patch`] for an explicit constraint matrix and index sets.
fn corrector_on_indices(
    a: &SparseSym,
    constraint: &Csr,
    v: &[f64],
    fine: &[usize],
    constraints: &[usize],
    settings: &CorrectorSettings,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = fine.len();
    if n == 0 {
        return Ok((
            vec![],
            SolveReport {
                iterations: 0,
                final_relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    let av = a.matvec(v);
    let mut b: Vec<f64> = fine.iter().map(|&i| av[i]).collect();
    let app = SparseSym::from_csr_trusted(a.submatrix(fine, fine));
    let proj = KernelProjector::new(constraint.submatrix(constraints, fine))?;
    let diag = app.csr().diagonal();
    proj.apply(&mut b);
    let bnorm = norm2(&b);
    let mut w = vec![0.0; n];
    let done = |it, rel| SolveReport {
        iterations: it,
        final_relative_residual: rel,
        converged: true,
    };
    if bnorm == 0.0 {
        return Ok((w, done(0, 0.0)));
    }
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        proj.apply(&mut z);
        z
    };
    let mut r = b;
    let mut z = precond(&r);
    let mut dir = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    for it in 1..=settings.max_iter {
        app.matvec_into(&dir, &mut q);
        let pq = dot(&dir, &q);
        if !(pq > 0.0) {
            return Err(Error::Indefinite(format!("corrector operator: pᵀAp = {pq:e}")));
        }
        let alpha = rz / pq;
        axpy(alpha, &dir, &mut w);
        axpy(-alpha, &q, &mut r);
        proj.apply(&mut r);
        let rel = norm2(&r) / bnorm;
        if rel <= settings.tol {
            proj.apply(&mut w);
            return Ok((w, done(it, rel)));
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (di, zi) in dir.iter_mut().zip(&z) {
            *di = zi + beta * *di;
        }
    }
    Err(Error::SolveFailed {
        context: "corrector projected CG".into(),
        report: SolveReport {
            iterations: settings.max_iter,
            final_relative_residual: f64::NAN,
            converged: false,
        },
    })
}

/// 𝒞φ_z on the ℓ-layer patch (or globally for `None`) as a fine interior vector.
pub fn compute_corrector(
    tl: &TwoLevelMesh,
    a: &SparseSym,
    z: usize,
    layers: Option<usize>,
) -> Result<Vec<f64>> {
    compute_corrector_of(tl, a, &hat(tl, z), z, layers)
}

/// Corrector of an arbitrary fine function v, localized around coarse vertex z.
pub fn compute_corrector_of(
    tl: &TwoLevelMesh,
    a: &SparseSym,
    v: &[f64],
    z: usize,
    layers: Option<usize>,
) -> Result<Vec<f64>> {
    if a.dim() != tl.fine.n_interior() || v.len() != a.dim() {
        return invalid("operator and function must live on the fine interior space");
    }
    if z >= tl.coarse.n_interior() {
        return invalid(format!("coarse vertex {z} is not interior"));
    }
    let p = patch(tl, z, layers);
    let (w, _) = corrector_on_patch(tl, a, v, &p, &CorrectorSettings::default())?;
    let mut out = vec![0.0; a.dim()];
    for (&i, wi) in p.fine.iter().zip(w) {
        out[i] = wi;
    }
    Ok(out)
}

/// Coarse hat φ_z as a fine interior vector.
pub fn hat(tl: &TwoLevelMesh, z: usize) -> Vec<f64> {
    let mut e = vec![0.0; tl.coarse.n_interior()];
    e[z] = 1.0;
    tl.prolong(&e)
}

/// Metadata identifying a basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodDescriptor {
    pub rect: Rect,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub fine_order: usize,
    /// `None` means global (unlocalized) correctors.
    pub layers: Option<usize>,
    /// Unknown layout of the rows and columns (`real_scalar` for a scalar basis
    /// shared by all slots).
    pub flavor: Flavor,
    pub metric_tag: String,
}

/// Corrected coarse basis (I − 𝒞)φ_z stored as a sparse fine × coarse matrix
/// in the descriptor's layout.
#[derive(Debug, Clone)]
pub struct LodBasis {
    pub descriptor: LodDescriptor,
    matrix: Csr,
}

const BASIS_MAGIC: &[u8; 8] = b"MDGSLOD1";

impl LodBasis {
    pub fn matrix(&self) -> &Csr {
        &self.matrix
    }

    pub fn n_columns(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column(&self, z: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.matrix.ncols()];
        e[z] = 1.0;
        self.matrix.matvec(&e)
    }

    pub fn layers(&self) -> Option<usize> {
        self.descriptor.layers
    }

    /// Binary container: magic, header length (u64 LE), JSON header, then the
    /// columns as (nnz u64, rows u32[nnz], values f64[nnz]).
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.descriptor)
            .map_err(|e| Error::Config(format!("basis header: {e}")))?;
        let csc = self.matrix.transpose();
        let mut buf = Vec::with_capacity(16 + header.len() + csc.nnz() * 12 + 16);
        buf.extend_from_slice(BASIS_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(csc.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(csc.ncols() as u64).to_le_bytes());
        for z in 0..csc.nrows() {
            let (rows, vals) = csc.row(z);
            buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
            for r in rows {
                buf.extend_from_slice(&r.to_le_bytes());
            }
            for v in vals {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = || Error::InvalidInput(format!("{} is not a valid basis file", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != BASIS_MAGIC {
            return Err(bad());
        }
        let u64_of = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
        let hlen = u64_of(take(8)?);
        let descriptor: LodDescriptor =
            serde_json::from_slice(take(hlen)?).map_err(|_| bad())?;
        let ncols = u64_of(take(8)?);
        let nrows = u64_of(take(8)?);
        let mut trip = Vec::new();
        for z in 0..ncols {
            let nnz = u64_of(take(8)?);
            let rows: Vec<usize> = take(4 * nnz)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                .collect();
            let vals: Vec<f64> = take(8 * nnz)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if rows.iter().any(|&r| r >= nrows) {
                return Err(bad());
            }
            trip.extend(rows.into_iter().zip(vals).map(|(r, v)| (r, z, v)));
        }
        Ok(Self {
            descriptor,
            matrix: Csr::from_triplets(nrows, ncols, trip),
        })
    }

    /// Whether the basis was built for this two-level pair.
    pub fn matches(&self, tl: &TwoLevelMesh) -> bool {
        let d = &self.descriptor;
        d.rect == tl.coarse.mesh().rect()
            && d.n_coarse == tl.coarse.mesh().nx()
            && d.n_fine == tl.fine.mesh().nx()
            && d.fine_order == tl.fine.order()
            && self.matrix.nrows() == tl.fine.n_interior() * d.flavor.multiplicity()
            && self.matrix.ncols() == tl.coarse.n_interior() * d.flavor.multiplicity()
    }
}

/// Block of L₀ acting on component `c` (real and imaginary parts interleaved),
/// i.e. L₀ with the coupling between components dropped.
pub fn component_operator(model: &FemModel, c: usize) -> SparseSym {
    let l = model.layout();
    let idx: Vec<usize> = (l.index(c, 0, 0)..l.index(c, 0, 0) + l.flavor.parts() * l.n).collect();
    SparseSym::from_csr_trusted(model.l0().submatrix(&idx, &idx))
}

fn interleaved(idx: &[usize], parts: usize) -> Vec<usize> {
    idx.iter().flat_map(|&i| (0..parts).map(move |p| parts * i + p)).collect()
}

/// C ⊗ I_parts in the interleaved ordering.
fn interleaved_constraint(c: &Csr, parts: usize) -> Csr {
    if parts == 1 {
        return c.clone();
    }
    let mut trip = Vec::with_capacity(c.nnz() * parts);
    for r in 0..c.nrows() {
        let (cols, vals) = c.row(r);
        for (&j, &v) in cols.iter().zip(vals) {
            for p in 0..parts {
                trip.push((parts * r + p, parts * j as usize + p, v));
            }
        }
    }
    Csr::from_triplets(c.nrows() * parts, c.ncols() * parts, trip)
}

/// 𝒞φ_z for a component operator with `parts` interleaved unknowns per node
/// (φ_z placed in the real part).
pub fn compute_component_corrector(
    tl: &TwoLevelMesh,
    a: &SparseSym,
    parts: usize,
    z: usize,
    layers: Option<usize>,
) -> Result<Vec<f64>> {
    let nf = tl.fine.n_interior();
    if a.dim() != parts * nf || !(1..=2).contains(&parts) {
        return invalid("component operator does not match the fine space");
    }
    let cons = interleaved_constraint(&tl.constraint, parts);
    let (idx, w) = component_corrector(tl, a, &cons, parts, z, layers)?;
    let mut out = vec![0.0; a.dim()];
    for (i, wi) in idx.into_iter().zip(w) {
        out[i] = wi;
    }
    Ok(out)
}

fn component_corrector(
    tl: &TwoLevelMesh,
    a: &SparseSym,
    cons: &Csr,
    parts: usize,
    z: usize,
    layers: Option<usize>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let p = patch(tl, z, layers);
    let phi = interleaved_scatter(&hat(tl, z), parts);
    let fine = interleaved(&p.fine, parts);
    let (w, _) = corrector_on_indices(
        a,
        cons,
        &phi,
        &fine,
        &interleaved(&p.constraints, parts),
        &CorrectorSettings::default(),
    )?;
    Ok((fine, w))
}

/// Scalar values into the real slots of an interleaved vector.
fn interleaved_scatter(v: &[f64], parts: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len() * parts];
    for (i, x) in v.iter().enumerate() {
        out[parts * i] = *x;
    }
    out
}

/// Basis of the model's LOD space: per component, correctors of L₀ without the
/// inter-component coupling. Complex components use complex correctors; the
/// imaginary coarse unit is i times the real one.
pub fn build_model_basis(tl: &TwoLevelMesh, model: &FemModel, layers: Option<usize>) -> Result<LodBasis> {
    if !Arc::ptr_eq(model.space(), &tl.fine) && model.space().n_interior() != tl.fine.n_interior() {
        return invalid("model does not live on the fine space");
    }
    if layers == Some(0) {
        return invalid("patch layers must be at least 1");
    }
    let fl = model.layout();
    let flavor = fl.flavor;
    let parts = flavor.parts();
    let nc = tl.coarse.n_interior();
    let cl = Layout::new(flavor, nc);
    let cons = interleaved_constraint(&tl.constraint, parts);
    let mut trip = Vec::new();
    for c in 0..flavor.components() {
        let a = component_operator(model, c);
        let cols: Vec<Result<Vec<(usize, usize, f64)>>> = (0..nc)
            .into_par_iter()
            .map(|z| {
                let (idx, w) = component_corrector(tl, &a, &cons, parts, z, layers)
                    .map_err(|e| Error::InvalidInput(format!("corrector for coarse vertex {z}: {e}")))?;
                let mut col = interleaved_scatter(&hat(tl, z), parts);
                for (i, wi) in idx.into_iter().zip(w) {
                    col[i] -= wi;
                }
                let mut out = Vec::new();
                for (k, &v) in col.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let (i, q) = (k / parts, k % parts);
                    out.push((fl.index(c, i, q), cl.index(c, z, 0), v));
                    if parts == 2 {
                        // i·(a + ib) = −b + ia
                        let (row, sign) = if q == 0 { (fl.index(c, i, 1), 1.0) } else { (fl.index(c, i, 0), -1.0) };
                        out.push((row, cl.index(c, z, 1), sign * v));
                    }
                }
                Ok(out)
            })
            .collect();
        for col in cols {
            trip.extend(col?);
        }
    }
    let mesh = tl.coarse.mesh();
    Ok(LodBasis {
        descriptor: LodDescriptor {
            rect: mesh.rect(),
            n_coarse: mesh.nx(),
            n_fine: tl.fine.mesh().nx(),
            fine_order: tl.fine.order(),
            layers,
            flavor,
            metric_tag: model_basis_tag(model),
        },
        matrix: Csr::from_triplets(fl.dim(), cl.dim(), trip),
    })
}

/// Tag recorded with bases from [`build_model_basis`].
pub fn model_basis_tag(model: &FemModel) -> String {
    match model.params().kind {
        ModelKind::SoBec(_) => "so_bec: L0 component blocks, Rabi coupling omitted",
        ModelKind::Gpe { .. } => "gpe: L0",
        ModelKind::Linear => "linear: L0",
    }
    .to_string()
}

/// Builds the corrected basis column by column (in parallel).
pub fn build_lod_basis(
    tl: &TwoLevelMesh,
    a: &SparseSym,
    layers: Option<usize>,
    metric_tag: &str,
) -> Result<LodBasis> {
    if a.dim() != tl.fine.n_interior() {
        return invalid("basis operator does not live on the fine interior space");
    }
    if layers == Some(0) {
        return invalid("patch layers must be at least 1");
    }
    let nc = tl.coarse.n_interior();
    let cols: Vec<Result<Vec<(usize, usize, f64)>>> = (0..nc)
        .into_par_iter()
        .map(|z| {
            let phi = hat(tl, z);
            let p = patch(tl, z, layers);
            let (w, _) = corrector_on_patch(tl, a, &phi, &p, &CorrectorSettings::default())
                .map_err(|e| Error::InvalidInput(format!("corrector for coarse vertex {z}: {e}")))?;
            let mut col = phi;
            for (&i, wi) in p.fine.iter().zip(w) {
                col[i] -= wi;
            }
            Ok(col
                .into_iter()
                .enumerate()
                .filter(|(_, v)| *v != 0.0)
                .map(|(i, v)| (i, z, v))
                .collect())
        })
        .collect();
    let mut trip = Vec::new();
    for c in cols {
        trip.extend(c?);
    }
    let mesh = tl.coarse.mesh();
    Ok(LodBasis {
        descriptor: LodDescriptor {
            rect: mesh.rect(),
            n_coarse: mesh.nx(),
            n_fine: tl.fine.mesh().nx(),
            fine_order: tl.fine.order(),
            layers,
            flavor: Flavor::RealScalar,
            metric_tag: metric_tag.to_string(),
        },
        matrix: Csr::from_triplets(tl.fine.n_interior(), nc, trip),
    })
}

/// An energy model restricted to the span of a basis, evaluated exactly
/// through the fine model.
pub struct ReducedModel {
    fine: Arc<FemModel>,
    layout: Layout,
    /// Slot-expanded basis, fine dim × coarse dim, and its transpose.
    bhat: Csr,
    bhat_t: Csr,
    mass: SparseSym,
    h1: SparseSym,
    l0: SparseSym,
    ordering: Vec<usize>,
    factors: Mutex<Vec<((u64, u64), Arc<SparseCholesky>)>>,
}

/// Galerkin reduction of a fine model onto `basis`.
pub fn assemble_coarse_model(fine: Arc<FemModel>, basis: &LodBasis) -> Result<ReducedModel> {
    let fl = fine.layout();
    let b = &basis.matrix;
    let (bhat, layout) = if basis.descriptor.flavor == fl.flavor && b.nrows() == fl.dim() {
        let m = fl.flavor.multiplicity();
        (b.clone(), Layout::new(fl.flavor, b.ncols() / m))
    } else if basis.descriptor.flavor == Flavor::RealScalar && b.nrows() == fl.n {
        let layout = Layout::new(fl.flavor, b.ncols());
        let mut trip = Vec::with_capacity(b.nnz() * fl.slots());
        for s in 0..fl.slots() {
            for i in 0..b.nrows() {
                let (cols, vals) = b.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    trip.push((fl.slot_index(s, i), layout.slot_index(s, j as usize), v));
                }
            }
        }
        (Csr::from_triplets(fl.dim(), layout.dim(), trip), layout)
    } else {
        return invalid(format!(
            "basis ({:?}, {} rows) does not fit the fine model ({:?}, {} interior DOFs)",
            basis.descriptor.flavor,
            b.nrows(),
            fl.flavor,
            fl.n
        ));
    };
    let nc = layout.n;
    let bhat_t = bhat.transpose();
    let mass = fine.mass().galerkin(&bhat);
    let h1 = fine.h1().galerkin(&bhat);
    let l0 = fine.l0().galerkin(&bhat);
    // Order coarse unknowns by coarse vertex position (all slots together).
    let coords: Vec<[u32; 2]> = {
        let m = Mesh::new(basis.descriptor.rect, basis.descriptor.n_coarse, basis.descriptor.n_coarse)?;
        let cs = FeSpace::new(m, 1)?;
        cs.interior_dofs()
            .iter()
            .map(|&d| {
                let l = cs.lattice()[d];
                [l[0] as u32, l[1] as u32]
            })
            .collect()
    };
    let ordering = if coords.len() == nc {
        nested_dissection(&coords, 1, layout.slots(), |v, g| layout.slot_index(g, v))
    } else {
        (0..layout.dim()).collect()
    };
    Ok(ReducedModel {
        fine,
        layout,
        bhat,
        bhat_t,
        mass,
        h1,
        l0,
        ordering,
        factors: Mutex::new(Vec::new()),
    })
}

impl ReducedModel {
    pub fn fine(&self) -> &Arc<FemModel> {
        &self.fine
    }

    /// Fine coefficients B̂x of a coarse coefficient vector.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        self.bhat.matvec(x)
    }

    /// B̂ᵀ y for a fine dual vector y.
    pub fn restrict(&self, y: &[f64]) -> Vec<f64> {
        self.bhat_t.matvec(y)
    }

    /// L²-projection of a fine function onto the reduced space (unnormalized).
    pub fn l2_project(&self, fine_u: &[f64]) -> Result<Vec<f64>> {
        let rhs = self.restrict(&self.fine.mass().matvec(fine_u));
        let settings = CgSettings {
            tol: 1e-14,
            max_iter: None,
            precond: PrecondKind::Jacobi,
        };
        Ok(solve_checked(&self.mass, &rhs, None, &settings, "reduced L² projection")?.0)
    }

    fn shifted_factor(&self, alpha: f64, beta: f64) -> Result<Arc<SparseCholesky>> {
        let key = (alpha.to_bits(), beta.to_bits());
        let mut cache = self.factors.lock().expect("factor cache poisoned");
        if let Some((_, f)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(f.clone());
        }
        let a = self.l0.scaled_sum(beta, &self.mass, alpha);
        let f = Arc::new(SparseCholesky::factor(&a, Some(self.ordering.clone()))?);
        cache.push((key, f.clone()));
        Ok(f)
    }
}

impl EnergyModel for ReducedModel {
    fn layout(&self) -> Layout {
        self.layout
    }
    fn mass(&self) -> &SparseSym {
        &self.mass
    }
    fn h1(&self) -> &SparseSym {
        &self.h1
    }
    fn l0(&self) -> &SparseSym {
        &self.l0
    }
    fn quartic(&self, u: &[f64]) -> f64 {
        self.fine.quartic(&self.expand(u))
    }
    fn quartic_pencil<'a>(&'a self, u: &[f64], w: &[f64]) -> QuarticPencil<'a> {
        self.fine.quartic_pencil(&self.expand(u), &self.expand(w))
    }
    fn nonlinear_gradient(&self, u: &[f64]) -> Vec<f64> {
        self.restrict(&self.fine.nonlinear_gradient(&self.expand(u)))
    }
    fn metric<'a>(&'a self, u: &[f64]) -> Result<Box<dyn MetricOperator + 'a>> {
        let nonlinear = if self.fine.has_interaction() {
            let uq = self.fine.eval_qp(&self.expand(u));
            let pat = self.fine.space().pattern();
            self.fine
                .nonlinear_scalar_values(&uq)
                .into_iter()
                .map(|v| pat.to_sparse(v))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Box::new(ReducedMetric {
            model: self,
            nonlinear,
        }))
    }
    fn hessian<'a>(&'a self, u: &[f64]) -> Result<Box<dyn LinearOperator + 'a>> {
        Ok(Box::new(ReducedHessian {
            model: self,
            fine: self.fine.hessian(&self.expand(u))?,
        }))
    }
}

/// 𝓛₀,H + B̂ᵀN(B̂u)B̂ applied matrix-free.
pub struct ReducedMetric<'a> {
    model: &'a ReducedModel,
    /// Per-component fine matrices ∫ρ_c φ_i φ_j.
    nonlinear: Vec<SparseSym>,
}

impl LinearOperator for ReducedMetric<'_> {
    fn dim(&self) -> usize {
        self.model.layout.dim()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.model.l0.matvec_into(x, y);
        if self.nonlinear.is_empty() {
            return;
        }
        let fl = self.model.fine.layout();
        let np = fl.flavor.parts();
        let xf = self.model.expand(x);
        let mut yf = vec![0.0; fl.dim()];
        for s in 0..fl.slots() {
            let v = fl.gather_slot(s, &xf);
            let t = self.nonlinear[s / np].matvec(&v);
            fl.scatter_slot(s, &t, &mut yf);
        }
        let yc = self.model.restrict(&yf);
        axpy(1.0, &yc, y);
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

impl MetricOperator for ReducedMetric<'_> {
    fn solve_shifted(
        &self,
        alpha: f64,
        beta: f64,
        b: &[f64],
        x0: Option<&[f64]>,
        settings: &CgSettings,
    ) -> Result<(Vec<f64>, SolveReport)> {
        struct Shifted<'b> {
            op: &'b ReducedMetric<'b>,
            alpha: f64,
            beta: f64,
        }
        impl LinearOperator for Shifted<'_> {
            fn dim(&self) -> usize {
                self.op.dim()
            }
            fn apply_into(&self, x: &[f64], y: &mut [f64]) {
                self.op.apply_into(x, y);
                if self.beta != 1.0 {
                    y.iter_mut().for_each(|v| *v *= self.beta);
                }
                if self.alpha != 0.0 {
                    let mx = self.op.model.mass.matvec(x);
                    axpy(self.alpha, &mx, y);
                }
            }
            fn diagonal(&self) -> Option<Vec<f64>> {
                None
            }
        }
        let op = Shifted {
            op: self,
            alpha,
            beta,
        };
        let max_iter = settings.max_iter.unwrap_or(10 * self.dim());
        match settings.precond {
            PrecondKind::None => pcg(&op, &crate::cg::IdentityPrecond, b, x0, settings.tol, max_iter),
            PrecondKind::Jacobi | PrecondKind::Factorized => {
                let f = self.model.shifted_factor(alpha, beta)?;
                let prec = FactorPrecond {
                    factor: &f,
                    scale: 1.0,
                };
                pcg(&op, &prec, b, x0, settings.tol, max_iter)
            }
        }
    }
}

/// B̂ᵀE″(B̂u)B̂.
pub struct ReducedHessian<'a> {
    model: &'a ReducedModel,
    fine: Box<dyn LinearOperator + 'a>,
}

impl LinearOperator for ReducedHessian<'_> {
    fn dim(&self) -> usize {
        self.model.layout.dim()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let hx = self.fine.apply(&self.model.expand(x));
        y.copy_from_slice(&self.model.restrict(&hx));
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

/// Result of a reduced ground-state solve.
#[derive(Debug, Clone)]
pub struct LodGroundState {
    pub coarse: GroundState,
    /// Fine coefficients of the reduced minimizer.
    pub fine_u: Vec<f64>,
}

/// Minimizes E over the reduced space under ‖u‖_{L²} = 1, starting from the
/// normalized L²-projection of a fine initial state.
pub fn lod_ground_state(
    model: &ReducedModel,
    fine_u0: &[f64],
    config: &SolverConfig,
) -> Result<LodGroundState> {
    let mut x0 = model.l2_project(fine_u0)?;
    let nrm = model.mass_norm(&x0);
    if !(nrm > 0.0) {
        return invalid("initial state projects to zero");
    }
    x0.iter_mut().for_each(|v| *v /= nrm);
    let coarse = solve_ground_state(model, &x0, config)?;
    let fine_u = model.expand(&coarse.u);
    Ok(LodGroundState { coarse, fine_u })
}

/// Coarse-mass Gram of P_H applied to the basis columns.
pub fn projected_gram(tl: &TwoLevelMesh, basis: &LodBasis) -> Result<DMatrix<f64>> {
    let nc = basis.n_columns();
    let mut proj = Vec::with_capacity(nc);
    for z in 0..nc {
        proj.push(tl.l2_project(&basis.column(z))?);
    }
    let m = tl.coarse.mass();
    Ok(DMatrix::from_fn(nc, nc, |i, j| dot(&proj[i], &m.matvec(&proj[j]))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::norm_max;

    fn laplace_pair(nc: usize, nf: usize) -> (TwoLevelMesh, SparseSym) {
        let tl = TwoLevelMesh::new(Rect::unit_square(), nc, nf, 1).unwrap();
        let a = tl.fine.stiffness().clone();
        (tl, a)
    }

    #[test]
    fn layers_follow_log2() {
        assert_eq!(default_layers(0.125, 1.0), 3);
        assert_eq!(default_layers(0.5, 2.0), 2);
        assert_eq!(default_layers(0.0625, 2.0), 5);
        assert_eq!(default_layers(1.0, 1.0), 1);
    }

    #[test]
    fn non_nested_pair_rejected() {
        assert!(TwoLevelMesh::new(Rect::unit_square(), 3, 8, 1).is_err());
        assert!(TwoLevelMesh::new(Rect::unit_square(), 4, 12, 1).is_err());
    }

    #[test]
    fn prolongation_reproduces_coarse_functions() {
        let tl = TwoLevelMesh::new(Rect::unit_square(), 4, 16, 2).unwrap();
        let xc: Vec<f64> = (0..tl.coarse.n_interior()).map(|i| (i as f64).sin()).collect();
        let xf = tl.prolong(&xc);
        let back = tl.l2_project(&xf).unwrap();
        let d: Vec<f64> = back.iter().zip(&xc).map(|(a, b)| a - b).collect();
        assert!(norm_max(&d) < 1e-12);
    }

    #[test]
    fn fine_equal_coarse_gives_zero_corrector() {
        let (tl, a) = laplace_pair(8, 8);
        let c = compute_corrector(&tl, &a, 10, None).unwrap();
        assert!(norm_max(&c) < 1e-14);
    }

    #[test]
    fn corrector_lies_in_kernel() {
        let (tl, a) = laplace_pair(4, 32);
        for layers in [Some(1), None] {
            let c = compute_corrector(&tl, &a, 4, layers).unwrap();
            assert!(norm_max(&c) > 1e-6);
            let pc = tl.l2_project(&c).unwrap();
            assert!(norm_max(&pc) < 1e-10, "{}", norm_max(&pc));
        }
    }

    #[test]
    fn basis_round_trips_through_file() {
        let (tl, a) = laplace_pair(4, 16);
        let basis = build_lod_basis(&tl, &a, Some(1), "laplace").unwrap();
        assert_eq!(basis.n_columns(), tl.coarse.n_interior());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.lod");
        basis.write(&path).unwrap();
        let back = LodBasis::read(&path).unwrap();
        assert_eq!(back.descriptor, basis.descriptor);
        assert_eq!(back.matrix().values(), basis.matrix().values());
        assert!(back.matches(&tl));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(LodBasis::read(&path).is_err());
    }

    fn energy_norm(a: &SparseSym, v: &[f64]) -> f64 {
        dot(v, &a.matvec(v)).sqrt()
    }

    #[test]
    fn truncation_error_decays_with_layers() {
        let (tl, a) = laplace_pair(8, 32);
        let z = 2 * 7 + 2;
        let global = compute_corrector(&tl, &a, z, None).unwrap();
        let errs: Vec<f64> = (1..=3)
            .map(|l| {
                let c = compute_corrector(&tl, &a, z, Some(l)).unwrap();
                let d: Vec<f64> = c.iter().zip(&global).map(|(x, y)| x - y).collect();
                energy_norm(&a, &d)
            })
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= 0.7 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn projected_gram_is_coarse_mass() {
        let (tl, a) = laplace_pair(4, 16);
        let basis = build_lod_basis(&tl, &a, Some(1), "laplace").unwrap();
        let g = projected_gram(&tl, &basis).unwrap();
        let m = tl.coarse.mass().to_dense();
        assert!((g - m).amax() < 1e-8);
    }

    #[test]
    fn global_columns_are_orthogonal_to_kernel() {
        let (tl, a) = laplace_pair(4, 16);
        let basis = build_lod_basis(&tl, &a, None, "laplace").unwrap();
        let n = tl.fine.n_interior();
        for k in 0..5 {
            // Random fine function minus its coarse part lies in W.
            let v: Vec<f64> = (0..n).map(|i| ((i * 37 + k * 11) % 17) as f64 - 8.0).collect();
            let pv = tl.prolong(&tl.l2_project(&v).unwrap());
            let w: Vec<f64> = v.iter().zip(&pv).map(|(x, y)| x - y).collect();
            let aw = a.matvec(&w);
            for z in 0..basis.n_columns() {
                let col = basis.column(z);
                let ip = dot(&col, &aw).abs();
                assert!(ip <= 1e-8 * energy_norm(&a, &col) * energy_norm(&a, &w), "{ip:e}");
            }
        }
    }

    #[test]
    fn same_mesh_basis_is_hat_basis() {
        let (tl, a) = laplace_pair(6, 6);
        let basis = build_lod_basis(&tl, &a, None, "laplace").unwrap();
        let p = tl.prolongation().to_dense();
        assert!((basis.matrix().to_dense() - p).amax() < 1e-14);
    }

    #[test]
    fn reduced_model_with_hat_basis_matches_coarse_model() {
        let params = crate::models::ModelParams::gpe(crate::models::identity_coef(), crate::models::constant(1.0), 5.0);
        let tl = TwoLevelMesh::new(Rect::unit_square(), 6, 6, 1).unwrap();
        let fine = Arc::new(FemModel::new(params, tl.fine().clone(), crate::field::Flavor::RealScalar).unwrap());
        let basis = build_model_basis(&tl, &fine, None).unwrap();
        let red = assemble_coarse_model(fine.clone(), &basis).unwrap();
        let u: Vec<f64> = (0..red.dim()).map(|i| (0.3 * i as f64).cos()).collect();
        assert!((red.energy(&u) - fine.energy(&u)).abs() < 1e-12 * fine.energy(&u).abs());
        let gr = red.gradient(&u);
        let gf = fine.gradient(&u);
        let d: Vec<f64> = gr.iter().zip(&gf).map(|(x, y)| x - y).collect();
        assert!(norm_max(&d) < 1e-12 * norm_max(&gf));
        let mr = red.metric(&u).unwrap().apply(&u);
        let mf = fine.metric(&u).unwrap().apply(&u);
        let d: Vec<f64> = mr.iter().zip(&mf).map(|(x, y)| x - y).collect();
        assert!(norm_max(&d) < 1e-12 * norm_max(&mf));
    }

    fn so_bec_pair(nc: usize, nf: usize) -> (TwoLevelMesh, Arc<FemModel>) {
        let tl = TwoLevelMesh::new(Rect::centered_square(1.0), nc, nf, 1).unwrap();
        let m = FemModel::new(crate::models::ModelParams::so_bec_reference(), tl.fine().clone(), Flavor::ComplexSpinor).unwrap();
        (tl, Arc::new(m))
    }

    #[test]
    fn spinor_basis_columns_project_to_coarse_units() {
        let (tl, model) = so_bec_pair(4, 16);
        let basis = build_model_basis(&tl, &model, Some(2)).unwrap();
        let fl = model.layout();
        let cl = Layout::new(fl.flavor, tl.coarse().n_interior());
        assert_eq!(basis.n_columns(), cl.dim());
        assert!(basis.matches(&tl));
        for j in [0, 5, cl.dim() - 1] {
            let col = basis.column(j);
            for s in 0..fl.slots() {
                let p = tl.l2_project(&fl.gather_slot(s, &col)).unwrap();
                for (z, v) in p.iter().enumerate() {
                    let e = if cl.slot_index(s, z) == j { 1.0 } else { 0.0 };
                    assert!((v - e).abs() < 1e-9, "column {j} slot {s}: {v}");
                }
            }
        }
    }

    #[test]
    fn imaginary_columns_are_i_times_real_columns() {
        let (tl, model) = so_bec_pair(4, 16);
        let basis = build_model_basis(&tl, &model, None).unwrap();
        let cl = Layout::new(Flavor::ComplexSpinor, tl.coarse().n_interior());
        let fl = model.layout();
        let z = 4;
        for c in 0..2 {
            let re = basis.column(cl.index(c, z, 0));
            let im = basis.column(cl.index(c, z, 1));
            let d: Vec<f64> = fl.times_i(&re).iter().zip(&im).map(|(a, b)| a - b).collect();
            assert!(norm_max(&d) < 1e-15);
            // The spin-orbit term makes the corrected function genuinely complex.
            assert!(norm_max(&fl.gather_slot(2 * c + 1, &re)) > 1e-3);
        }
    }

    #[test]
    fn complex_corrector_is_a_orthogonal_to_kernel() {
        let (tl, model) = so_bec_pair(4, 16);
        let a = component_operator(&model, 0);
        let w = compute_component_corrector(&tl, &a, 2, 4, None).unwrap();
        let col: Vec<f64> = interleaved_scatter(&hat(&tl, 4), 2).iter().zip(&w).map(|(x, y)| x - y).collect();
        let cons = interleaved_constraint(tl.constraint(), 2);
        assert!(norm_max(&cons.matvec(&w)) < 1e-12);
        let n = tl.fine().n_interior();
        for k in 0..3 {
            let v: Vec<f64> = (0..n).map(|i| ((i * 31 + k * 7) % 13) as f64 - 6.0).collect();
            let pv = tl.prolong(&tl.l2_project(&v).unwrap());
            let wk: Vec<f64> = v.iter().zip(&pv).map(|(x, y)| x - y).collect();
            // Put the kernel function into the imaginary part as well.
            let mut ww = vec![0.0; 2 * n];
            for i in 0..n {
                ww[2 * i] = wk[i];
                ww[2 * i + 1] = 0.5 * wk[(i + 3) % n] - 0.5 * pv[(i + 3) % n];
            }
            let ww_k = {
                let mut t = ww.clone();
                let pim = tl.prolong(&tl.l2_project(&(0..n).map(|i| t[2 * i + 1]).collect::<Vec<_>>()).unwrap());
                for i in 0..n {
                    t[2 * i + 1] -= pim[i];
                }
                t
            };
            let ip = dot(&col, &a.matvec(&ww_k)).abs();
            assert!(ip <= 1e-8 * dot(&col, &a.matvec(&col)).sqrt() * dot(&ww_k, &a.matvec(&ww_k)).sqrt(), "{ip:e}");
        }
    }

    #[test]
    fn spinor_model_basis_on_same_mesh_reproduces_coarse_model() {
        let (tl, model) = so_bec_pair(6, 6);
        let basis = build_model_basis(&tl, &model, None).unwrap();
        let red = assemble_coarse_model(model.clone(), &basis).unwrap();
        let u: Vec<f64> = (0..red.dim()).map(|i| (0.37 * i as f64).sin()).collect();
        assert!((red.energy(&u) - model.energy(&u)).abs() < 1e-12 * model.energy(&u).abs());
        let d: Vec<f64> = red.gradient(&u).iter().zip(model.gradient(&u)).map(|(x, y)| x - y).collect();
        assert!(norm_max(&d) < 1e-12 * norm_max(&model.gradient(&u)));
    }
}

//! Generalized symmetric eigenproblems A x = λ M x: a dense oracle and a
//! blocked preconditioned solver (LOBPCG-style) with optional M-orthogonal
//! constraints.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cg::{solve_with, CgSettings, LinearOperator, PrecondKind, Preconditioner};
use crate::error::{invalid, Error, Result};
use crate::sparse::SparseSym;
use crate::vecops::{axpy, dot};

/// Largest dimension accepted by the dense oracle.
pub const DENSE_ORACLE_MAX_DIM: usize = 2000;

#[derive(Debug, Clone)]
pub struct DenseSpectrum {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// M-orthonormal eigenvectors as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

/// Full spectrum of the pencil (A, M) by Cholesky reduction to a standard
/// symmetric problem.
pub fn dense_eig_oracle(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DenseSpectrum> {
    let n = a.nrows();
    if a.ncols() != n || m.nrows() != n || m.ncols() != n {
        return invalid("dense oracle needs square matrices of equal size");
    }
    if n > DENSE_ORACLE_MAX_DIM {
        return invalid(format!("dense oracle limited to dim ≤ {DENSE_ORACLE_MAX_DIM}, got {n}"));
    }
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| Error::InvalidInput("M is not symmetric positive definite".into()))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::InvalidInput("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::InvalidInput("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let y = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let vectors = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::InvalidInput("singular Cholesky factor".into()))?;
    Ok(DenseSpectrum { values, vectors })
}

#[derive(Debug, Clone)]
pub struct EigenSettings {
    /// Absolute tolerance on ‖Ax − λMx‖_{M⁻¹} for M-normalized x.
    pub tol: f64,
    pub max_iter: usize,
    /// Guard vectors carried beyond the k requested.
    pub extra: usize,
    /// Inner CG used as approximate A⁻¹ preconditioner.
    pub inner: CgSettings,
    pub seed: u64,
}

impl Default for EigenSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            extra: 3,
            inner: CgSettings {
                tol: 1e-3,
                max_iter: Some(300),
                precond: PrecondKind::Jacobi,
            },
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenReport {
    pub values: Vec<f64>,
    #[serde(skip)]
    pub vectors: Vec<Vec<f64>>,
    /// ‖Ax − λMx‖_{M⁻¹} per pair.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Index ranges [start, end) of eigenvalues equal to 1e-8 relative.
    pub clusters: Vec<(usize, usize)>,
}

/// M-norm of a dual vector r: sqrt(rᵀ M⁻¹ r).
pub fn dual_norm(m: &SparseSym, r: &[f64]) -> Result<f64> {
    let settings = CgSettings {
        tol: 1e-10,
        max_iter: None,
        precond: PrecondKind::Jacobi,
    };
    let (z, _) = solve_with(m, r, None, &settings)?;
    Ok(dot(r, &z).max(0.0).sqrt())
}

struct Block {
    x: Vec<Vec<f64>>,
    ax: Vec<Vec<f64>>,
    mx: Vec<Vec<f64>>,
}

impl Block {
    fn len(&self) -> usize {
        self.x.len()
    }

    fn combine(&self, z: &DMatrix<f64>) -> Block {
        let comb = |cols: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..z.ncols())
                .map(|j| {
                    let mut v = vec![0.0; cols[0].len()];
                    for (i, c) in cols.iter().enumerate() {
                        let zij = z[(i, j)];
                        if zij != 0.0 {
                            axpy(zij, c, &mut v);
                        }
                    }
                    v
                })
                .collect()
        };
        Block {
            x: comb(&self.x),
            ax: comb(&self.ax),
            mx: comb(&self.mx),
        }
    }

    fn concat(parts: Vec<Block>) -> Block {
        let mut out = Block {
            x: vec![],
            ax: vec![],
            mx: vec![],
        };
        for p in parts {
            out.x.extend(p.x);
            out.ax.extend(p.ax);
            out.mx.extend(p.mx);
        }
        out
    }
}

fn gram(u: &[Vec<f64>], v: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(u.len(), v.len(), |i, j| dot(&u[i], &v[j]))
}

/// M-orthonormalizes a block (SVQB), dropping numerically dependent directions.
fn svqb(b: &Block, drop_tol: f64) -> Option<Block> {
    let g = gram(&b.x, &b.mx);
    let g = (&g + g.transpose()) * 0.5;
    let live: Vec<usize> = (0..g.nrows())
        .filter(|&i| g[(i, i)] > 0.0 && g[(i, i)].is_finite())
        .collect();
    if live.len() < g.nrows() {
        let sub = Block {
            x: live.iter().map(|&i| b.x[i].clone()).collect(),
            ax: live.iter().map(|&i| b.ax[i].clone()).collect(),
            mx: live.iter().map(|&i| b.mx[i].clone()).collect(),
        };
        return if sub.len() == 0 { None } else { svqb(&sub, drop_tol) };
    }
    let s = g.nrows();
    let d: Vec<f64> = (0..s).map(|i| 1.0 / g[(i, i)].sqrt()).collect();
    let gs = DMatrix::from_fn(s, s, |i, j| g[(i, j)] * d[i] * d[j]);
    let eig = SymmetricEigen::new(gs);
    let tmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..s)
        .filter(|&i| eig.eigenvalues[i] > drop_tol * tmax)
        .collect();
    if keep.is_empty() {
        return None;
    }
    let t = DMatrix::from_fn(s, keep.len(), |i, j| {
        d[i] * eig.eigenvectors[(i, keep[j])] / eig.eigenvalues[keep[j]].sqrt()
    });
    Some(b.combine(&t))
}

fn orthonormality_defect(b: &Block) -> f64 {
    let g = gram(&b.x, &b.mx);
    let mut d: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let e = if i == j { 1.0 } else { 0.0 };
            d = d.max((g[(i, j)] - e).abs());
        }
    }
    d
}

/// Rayleigh–Ritz on an M-orthonormal block: returns ascending Ritz values and the rotated block.
fn rayleigh_ritz(b: &Block) -> (Vec<f64>, Block) {
    let (vals, c) = rayleigh_ritz_coeffs(b);
    (vals, b.combine(&c))
}

/// Ascending Ritz values and the coefficient matrix of the Ritz vectors.
fn rayleigh_ritz_coeffs(b: &Block) -> (Vec<f64>, DMatrix<f64>) {
    let h = gram(&b.x, &b.ax);
    let h = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    let s = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let c = DMatrix::from_fn(s, s, |i, j| eig.eigenvectors[(i, order[j])]);
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    (vals, c)
}

struct Constraint {
    y: Vec<Vec<f64>>,
    my: Vec<Vec<f64>>,
}

impl Constraint {
    fn new(m: &SparseSym, basis: &[Vec<f64>]) -> Result<Self> {
        let mut y: Vec<Vec<f64>> = Vec::new();
        let mut my: Vec<Vec<f64>> = Vec::new();
        for v in basis {
            let mut w = v.clone();
            for _ in 0..2 {
                for (yi, myi) in y.iter().zip(&my) {
                    let c = dot(myi, &w);
                    axpy(-c, yi, &mut w);
                }
            }
            let mw = m.matvec(&w);
            let nrm = dot(&w, &mw).sqrt();
            if !(nrm > 1e-12) {
                return invalid("constraint basis is linearly dependent");
            }
            y.push(w.iter().map(|x| x / nrm).collect());
            my.push(mw.iter().map(|x| x / nrm).collect());
        }
        Ok(Self { y, my })
    }

    /// v ← v − Y (MY)ᵀ v
    fn project(&self, v: &mut [f64]) {
        for _ in 0..2 {
            for (yi, myi) in self.y.iter().zip(&self.my) {
                let c = dot(myi, v);
                axpy(-c, yi, v);
            }
        }
    }

    /// Residuals live in the dual space: r ← r − MY Yᵀ r.
    fn project_dual(&self, r: &mut [f64]) {
        for _ in 0..2 {
            for (yi, myi) in self.y.iter().zip(&self.my) {
                let c = dot(yi, r);
                axpy(-c, myi, r);
            }
        }
    }
}

fn find_clusters(values: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        let split = i == values.len()
            || (values[i] - values[i - 1]).abs() > 1e-8 * values[i].abs().max(1.0);
        if split {
            if i - start > 1 {
                out.push((start, i));
            }
            start = i;
        }
    }
    out
}

/// k smallest eigenpairs of (A, M) restricted to the M-orthogonal complement
/// of `constraint`. `a` must be SPD (its inverse is approximated by inner CG).
pub fn smallest_eigpairs_op(
    a: &dyn LinearOperator,
    m: &SparseSym,
    k: usize,
    constraint: &[Vec<f64>],
    settings: &EigenSettings,
) -> Result<EigenReport> {
    lobpcg(a, m, k, constraint, settings, None)
}

/// As [`smallest_eigpairs_op`] with a caller-supplied preconditioner
/// (approximating A⁻¹) replacing the inner CG.
pub fn smallest_eigpairs_prec(
    a: &dyn LinearOperator,
    m: &SparseSym,
    k: usize,
    constraint: &[Vec<f64>],
    settings: &EigenSettings,
    prec: &dyn Preconditioner,
) -> Result<EigenReport> {
    lobpcg(a, m, k, constraint, settings, Some(prec))
}

fn lobpcg(
    a: &dyn LinearOperator,
    m: &SparseSym,
    k: usize,
    constraint: &[Vec<f64>],
    settings: &EigenSettings,
    prec: Option<&dyn Preconditioner>,
) -> Result<EigenReport> {
    let n = a.dim();
    if m.dim() != n {
        return invalid("A and M dimensions differ");
    }
    if k == 0 || k + constraint.len() > n {
        return invalid(format!(
            "k = {k} exceeds the constrained subspace dimension {}",
            n.saturating_sub(constraint.len())
        ));
    }
    let cons = Constraint::new(m, constraint)?;
    let bs = (k + settings.extra).min(n - constraint.len());
    let a_diag = a.diagonal();
    let lumped: Vec<f64> = m.csr().diagonal();

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut x0 = Block {
        x: vec![],
        ax: vec![],
        mx: vec![],
    };
    for _ in 0..bs {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        cons.project(&mut v);
        x0.ax.push(a.apply(&v));
        x0.mx.push(m.matvec(&v));
        x0.x.push(v);
    }
    let x0 = svqb(&x0, 1e-14).ok_or_else(|| Error::Eigen("degenerate start block".into()))?;
    let (mut theta, mut x) = rayleigh_ritz(&x0);
    let mut p: Option<Block> = None;

    let precondition = |r: &[f64]| -> Result<Vec<f64>> {
        if let Some(pc) = prec {
            let mut z = vec![0.0; r.len()];
            pc.apply_into(r, &mut z);
            cons.project(&mut z);
            return Ok(z);
        }
        let (mut z, _) = match &a_diag {
            Some(_) => solve_with(a, r, None, &settings.inner)?,
            None => solve_with(
                a,
                r,
                None,
                &CgSettings {
                    precond: PrecondKind::None,
                    ..settings.inner
                },
            )?,
        };
        cons.project(&mut z);
        Ok(z)
    };

    let mut converged = vec![false; x.len()];
    let mut residuals = vec![f64::INFINITY; x.len()];
    let mut iterations = 0;
    loop {
        let mut active = Vec::new();
        for i in 0..x.len() {
            // The constrained space need not be invariant under A, so only the
            // part of the residual acting on it counts.
            let mut r: Vec<f64> = x.ax[i]
                .iter()
                .zip(&x.mx[i])
                .map(|(av, mv)| av - theta[i] * mv)
                .collect();
            cons.project_dual(&mut r);
            let approx: f64 = r
                .iter()
                .zip(&lumped)
                .map(|(ri, di)| ri * ri / di)
                .sum::<f64>()
                .sqrt();
            converged[i] = false;
            if approx <= 10.0 * settings.tol && i < k {
                let exact = dual_norm(m, &r)?;
                residuals[i] = exact;
                converged[i] = exact <= settings.tol;
            } else {
                residuals[i] = approx;
            }
            if !converged[i] {
                active.push(r);
            }
        }
        if converged[..k].iter().all(|c| *c) {
            break;
        }
        if iterations >= settings.max_iter {
            return Err(Error::Eigen(format!(
                "no convergence after {iterations} iterations; residuals {:?}",
                &residuals[..k]
            )));
        }
        iterations += 1;

        let mut w = Block {
            x: vec![],
            ax: vec![],
            mx: vec![],
        };
        for r in &active {
            let z = precondition(r)?;
            w.ax.push(a.apply(&z));
            w.mx.push(m.matvec(&z));
            w.x.push(z);
        }
        // Stable form: [W, P] is M-orthogonalized against X, and the new P is
        // the [W, P] part of the Ritz vectors.
        let mut parts = vec![w];
        if let Some(pb) = p.take() {
            parts.push(pb);
        }
        let mut wp = Some(Block::concat(parts));
        // Orthonormalizing [W, P] can divide by small singular values once W is
        // nearly dependent on X, which amplifies any mismatch between the
        // vectors and their carried products. The first pass is therefore
        // followed by fresh products and a second pass.
        for pass in 0..2 {
            let Some(mut b) = wp.take() else { break };
            for _ in 0..2 {
                let c = gram(&x.mx, &b.x);
                let proj = x.combine(&c);
                for j in 0..b.len() {
                    axpy(-1.0, &proj.x[j], &mut b.x[j]);
                    axpy(-1.0, &proj.ax[j], &mut b.ax[j]);
                    axpy(-1.0, &proj.mx[j], &mut b.mx[j]);
                }
            }
            wp = svqb(&b, 1e-12).map(|mut b| {
                if pass == 0 {
                    b.ax = b.x.iter().map(|v| a.apply(v)).collect();
                    b.mx = b.x.iter().map(|v| m.matvec(v)).collect();
                }
                b
            });
        }
        let nx = x.len();
        let s = match wp {
            Some(wp) => Block::concat(vec![x, wp]),
            None => x,
        };
        let (vals, c) = rayleigh_ritz_coeffs(&s);
        let keep = bs.min(s.len());
        let ck = c.columns(0, keep).into_owned();
        let xnew = s.combine(&ck);
        let nwp = s.len() - nx;
        if nwp > 0 {
            let tail = Block {
                x: s.x[nx..].to_vec(),
                ax: s.ax[nx..].to_vec(),
                mx: s.mx[nx..].to_vec(),
            };
            let cp = ck.rows(nx, nwp).into_owned();
            let pb = tail.combine(&cp);
            p = Some(pb);
        }
        theta = vals[..keep].to_vec();
        x = xnew;
        // The implicitly updated AX, MX drift; recompute them now and then, and
        // re-orthonormalize X if it has drifted away from M-orthonormality.
        if iterations % 20 == 0 {
            x.ax = x.x.iter().map(|v| a.apply(v)).collect();
            x.mx = x.x.iter().map(|v| m.matvec(v)).collect();
        }
        if orthonormality_defect(&x) > 1e-10 {
            let xr = svqb(&x, 1e-14).ok_or_else(|| Error::Eigen("search block collapsed".into()))?;
            if xr.len() < keep {
                return Err(Error::Eigen("search block lost rank".into()));
            }
            let (t, xr) = rayleigh_ritz(&xr);
            theta = t;
            x = xr;
        }
        converged.resize(keep, false);
        residuals.resize(keep, f64::INFINITY);
    }

    let values = theta[..k].to_vec();
    let clusters = find_clusters(&values);
    Ok(EigenReport {
        values,
        vectors: x.x[..k].to_vec(),
        residuals: residuals[..k].to_vec(),
        iterations,
        clusters,
    })
}

/// Convenience wrapper over an assembled matrix returning (value, vector) pairs.
pub fn smallest_eigpairs(
    a: &SparseSym,
    m: &SparseSym,
    k: usize,
    tol: f64,
    constraint_basis: Option<&[Vec<f64>]>,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let settings = EigenSettings {
        tol,
        ..EigenSettings::default()
    };
    let rep = smallest_eigpairs_op(a, m, k, constraint_basis.unwrap_or(&[]), &settings)?;
    Ok(rep.values.into_iter().zip(rep.vectors).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Mesh, Rect};
    use crate::space::FeSpace;

    #[test]
    fn oracle_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let ev = dense_eig_oracle(&a, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(ev.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn oracle_rejects_indefinite_mass() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!(dense_eig_oracle(&DMatrix::identity(2, 2), &m).is_err());
    }

    #[test]
    fn mass_pencil_gives_ones() {
        let s = FeSpace::new(Mesh::new(Rect::unit_square(), 6, 6).unwrap(), 1).unwrap();
        let pairs = smallest_eigpairs(s.mass(), s.mass(), 3, 1e-9, None).unwrap();
        for (v, _) in pairs {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn laplace_pair_against_oracle_and_constraint() {
        let s = FeSpace::new(Mesh::new(Rect::unit_square(), 12, 12).unwrap(), 1).unwrap();
        let (k, m) = (s.stiffness(), s.mass());
        let dense = dense_eig_oracle(&k.to_dense(), &m.to_dense()).unwrap();
        let pairs = smallest_eigpairs(k, m, 3, 1e-9, None).unwrap();
        for (i, (v, x)) in pairs.iter().enumerate() {
            assert!((v - dense.values[i]).abs() <= 1e-8 * dense.values[i]);
            let mx = m.matvec(x);
            assert!((dot(x, &mx) - 1.0).abs() < 1e-10);
        }
        let u1: Vec<f64> = dense.vectors.column(0).iter().cloned().collect();
        let cons = vec![u1.clone()];
        let pairs = smallest_eigpairs(k, m, 2, 1e-9, Some(&cons)).unwrap();
        assert!((pairs[0].0 - dense.values[1]).abs() <= 1e-8 * dense.values[1]);
        let mu = m.matvec(&u1);
        for (_, v) in &pairs {
            assert!(dot(&mu, v).abs() <= 1e-10);
        }
    }

    #[test]
    fn non_invariant_constraint_matches_compressed_oracle() {
        let s = FeSpace::new(Mesh::new(Rect::unit_square(), 8, 8).unwrap(), 1).unwrap();
        let n = s.n_interior();
        let (k, m) = (s.stiffness(), s.mass());
        // A generic constraint vector, not an eigenvector of (K, M).
        let c: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
        let pairs = smallest_eigpairs(k, m, 3, 1e-9, Some(&[c.clone()])).unwrap();
        // Oracle: (K, M) compressed to an M-orthogonal basis of {v : (c, v)_M = 0}.
        let mc = m.matvec(&c);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for j in 0..n {
            let mut v = vec![0.0; n];
            v[j] = 1.0;
            let a = dot(&mc, &v) / dot(&mc, &c);
            axpy(-a, &c, &mut v);
            q.push(v);
        }
        // Drop one dependent column: the last coordinate direction.
        q.pop();
        let qk = DMatrix::from_fn(n - 1, n - 1, |i, j| dot(&q[i], &k.matvec(&q[j])));
        let qm = DMatrix::from_fn(n - 1, n - 1, |i, j| dot(&q[i], &m.matvec(&q[j])));
        let dense = dense_eig_oracle(&qk, &qm).unwrap();
        for (i, (v, x)) in pairs.iter().enumerate() {
            assert!((v - dense.values[i]).abs() <= 1e-8 * dense.values[i], "{v} vs {}", dense.values[i]);
            assert!(dot(&mc, x).abs() <= 1e-10);
        }
    }

    #[test]
    fn k_too_large_is_invalid() {
        let s = FeSpace::new(Mesh::new(Rect::unit_square(), 2, 2).unwrap(), 1).unwrap();
        let r = smallest_eigpairs(s.stiffness(), s.mass(), 2, 1e-8, None);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn clusters_detected() {
        assert_eq!(find_clusters(&[1.0, 2.0, 2.0, 3.0]), vec![(1, 3)]);
        assert!(find_clusters(&[1.0, 2.0]).is_empty());
    }
}

//! Preconditioned conjugate gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::{Csr, SparseSym};
use crate::vecops::{axpy, dot, norm2};

/// Default relative residual tolerance for inner solves.
pub const DEFAULT_CG_TOL: f64 = 1e-12;

/// Symmetric linear operator acting on real coefficient vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    fn apply_into(&self, x: &[f64], y: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }

    /// Diagonal, when cheaply available (used for Jacobi preconditioning).
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

impl LinearOperator for SparseSym {
    fn dim(&self) -> usize {
        SparseSym::dim(self)
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.matvec_into(x, y)
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(Csr::diagonal(self))
    }
}

pub trait Preconditioner: Sync {
    fn apply_into(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPrecond;

impl Preconditioner for IdentityPrecond {
    fn apply_into(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(diag: &[f64]) -> Result<Self> {
        if let Some((i, d)) = diag.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
            return Err(Error::Indefinite(format!(
                "nonpositive diagonal entry {d:e} at {i}"
            )));
        }
        Ok(Self {
            inv_diag: diag.iter().map(|d| 1.0 / d).collect(),
        })
    }
}

impl Preconditioner for Jacobi {
    fn apply_into(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PrecondKind {
    None,
    Jacobi,
    /// Sparse Cholesky factor of the operator's u-independent part, when the
    /// operator provides one; plain operators fall back to Jacobi.
    Factorized,
}

#[derive(Debug, Clone, Copy)]
pub struct CgSettings {
    pub tol: f64,
    /// Defaults to 10·dim when `None`.
    pub max_iter: Option<usize>,
    pub precond: PrecondKind,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_CG_TOL,
            max_iter: None,
            precond: PrecondKind::Jacobi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub converged: bool,
}

/// Solves A x = b for SPD A. Non-convergence is reported, not raised;
/// a non-positive curvature direction is a hard error.
pub fn pcg(
    a: &dyn LinearOperator,
    prec: &dyn Preconditioner,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.dim();
    assert_eq!(b.len(), n);
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveReport {
                iterations: 0,
                final_relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let mut r = b.to_vec();
    let mut ap = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut iterations = 0;

    // Outer loop restarts from the true residual whenever the recursive one
    // claims convergence but the true one disagrees.
    loop {
        a.apply_into(&x, &mut ap);
        for i in 0..n {
            r[i] = b[i] - ap[i];
        }
        let true_rel = norm2(&r) / bnorm;
        if true_rel <= tol || iterations >= max_iter {
            return Ok((
                x,
                SolveReport {
                    iterations,
                    final_relative_residual: true_rel,
                    converged: true_rel <= tol,
                },
            ));
        }
        prec.apply_into(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        let mut stalled = true;
        while iterations < max_iter {
            a.apply_into(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                if pap == 0.0 && norm2(&p) == 0.0 {
                    break;
                }
                return Err(Error::Indefinite(format!(
                    "curvature pᵀAp = {pap:e} at CG iteration {iterations}"
                )));
            }
            let alpha = rz / pap;
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            iterations += 1;
            stalled = false;
            if norm2(&r) / bnorm <= tol {
                break;
            }
            prec.apply_into(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if stalled {
            // No progress possible; report the true residual.
            a.apply_into(&x, &mut ap);
            let res: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
            let rel = norm2(&res) / bnorm;
            return Ok((
                x,
                SolveReport {
                    iterations,
                    final_relative_residual: rel,
                    converged: rel <= tol,
                },
            ));
        }
    }
}

/// CG on an assembled symmetric matrix with the default preconditioning choices.
pub fn cg_solve(
    a: &SparseSym,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    precond: PrecondKind,
) -> Result<(Vec<f64>, SolveReport)> {
    solve_with(a, b, None, &CgSettings {
        tol,
        max_iter: Some(max_iter),
        precond,
    })
}

/// CG on any operator following `settings`; Jacobi uses the operator diagonal.
pub fn solve_with(
    a: &dyn LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    settings: &CgSettings,
) -> Result<(Vec<f64>, SolveReport)> {
    let max_iter = settings.max_iter.unwrap_or(10 * a.dim());
    match settings.precond {
        PrecondKind::None => pcg(a, &IdentityPrecond, b, x0, settings.tol, max_iter),
        PrecondKind::Jacobi | PrecondKind::Factorized => {
            let diag = a.diagonal().ok_or_else(|| {
                Error::InvalidInput("Jacobi requested for an operator without a diagonal".into())
            })?;
            pcg(a, &Jacobi::new(&diag)?, b, x0, settings.tol, max_iter)
        }
    }
}

/// Like [`solve_with`] but turns non-convergence into [`Error::SolveFailed`].
pub fn solve_checked(
    a: &dyn LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    settings: &CgSettings,
    context: &str,
) -> Result<(Vec<f64>, SolveReport)> {
    let (x, rep) = solve_with(a, b, x0, settings)?;
    if !rep.converged {
        return Err(Error::SolveFailed {
            context: context.to_string(),
            report: rep,
        });
    }
    Ok((x, rep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> SparseSym {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseSym::from_triplets(n, t).unwrap()
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let a = SparseSym::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 0.0];
        let (x, rep) = cg_solve(&a, &b, 1e-12, 50, PrecondKind::None).unwrap();
        assert_eq!(x, b);
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
    }

    #[test]
    fn diagonal_two_by_two() {
        let a = SparseSym::from_triplets(2, vec![(0, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let (x, _) = cg_solve(&a, &[2.0, 3.0], 1e-12, 10, PrecondKind::Jacobi).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_is_a_hard_error() {
        let a = SparseSym::from_triplets(2, vec![(0, 0, 1.0), (1, 1, -1.0)]).unwrap();
        let r = cg_solve(&a, &[0.0, 1.0], 1e-12, 10, PrecondKind::None);
        assert!(matches!(r, Err(Error::Indefinite(_))));
    }

    #[test]
    fn nonconvergence_is_reported() {
        let a = laplace_1d(200);
        let b = vec![1.0; 200];
        let (_, rep) = cg_solve(&a, &b, 1e-12, 3, PrecondKind::None).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 3);
    }

    #[test]
    fn a_norm_error_is_monotone() {
        let n = 60;
        let a = laplace_1d(n);
        let xs: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64).sin()).collect();
        let b = a.matvec(&xs);
        let mut prev = f64::INFINITY;
        for k in 1..=n {
            let (x, _) = cg_solve(&a, &b, 1e-14, k, PrecondKind::None).unwrap();
            let e: Vec<f64> = x.iter().zip(&xs).map(|(p, q)| p - q).collect();
            let en = a.quad_form(&e).sqrt();
            assert!(en <= prev * (1.0 + 1e-12) + 1e-14, "k={k}: {en} > {prev}");
            prev = en;
        }
        assert!(prev < 1e-8);
    }
}

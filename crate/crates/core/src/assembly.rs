//! Scalar finite element assembly into the interior pattern of a space.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::space::{FeSpace, NOT_INTERIOR};
use crate::sparse::{Csr, SparseSym};

pub type ScalarFn<'a> = &'a (dyn Fn([f64; 2]) -> f64 + Sync);
pub type MatrixFn<'a> = &'a (dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Sync);

const ELEM_CHUNK: usize = 512;

/// Computes all element matrices in parallel, then scatters them into the
/// interior pattern in element order (race-free, deterministic).
pub(crate) fn assemble_pattern_values<F>(space: &FeSpace, local: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let nl = space.nloc();
    let ne = space.n_elements();
    let pat = space.pattern();
    let mut locals = vec![0.0; ne * nl * nl];
    locals
        .par_chunks_mut(ELEM_CHUNK * nl * nl)
        .enumerate()
        .for_each(|(ci, chunk)| {
            for (k, m) in chunk.chunks_mut(nl * nl).enumerate() {
                local(ci * ELEM_CHUNK + k, m);
            }
        });
    let mut values = vec![0.0; pat.nnz()];
    for (pos, v) in pat.elem_pos.iter().zip(&locals) {
        if *pos != NOT_INTERIOR {
            values[*pos as usize] += v;
        }
    }
    values
}

/// Local mass matrix with per-quadrature-point weights `w(q)`.
pub(crate) fn local_mass(space: &FeSpace, e: usize, w: impl Fn(usize) -> f64, m: &mut [f64]) {
    let nl = space.nloc();
    m.fill(0.0);
    for q in 0..space.n_qp() {
        let c = w(q) * space.qp_weight(e, q);
        if c == 0.0 {
            continue;
        }
        let phi = space.phi(q);
        for a in 0..nl {
            let ca = c * phi[a];
            for b in 0..nl {
                m[a * nl + b] += ca * phi[b];
            }
        }
    }
}

fn physical_grads(space: &FeSpace, e: usize, q: usize) -> Vec<[f64; 2]> {
    let g = space.geometry(e);
    space.dphi_ref(q).iter().map(|&d| g.physical_grad(d)).collect()
}

/// Weighted interior mass matrix ∫ w φ_i φ_j.
pub fn assemble_mass(space: &FeSpace, weight: ScalarFn) -> SparseSym {
    let values = assemble_pattern_values(space, |e, m| {
        local_mass(space, e, |q| weight(space.qp_coord(e, q)), m)
    });
    space.pattern().to_sparse(values)
}

/// Interior mass values with weights given per quadrature point, `w[e*nq + q]`.
pub fn assemble_mass_qp(space: &FeSpace, w: &[f64]) -> Vec<f64> {
    let nq = space.n_qp();
    assert_eq!(w.len(), space.n_elements() * nq);
    assemble_pattern_values(space, |e, m| local_mass(space, e, |q| w[e * nq + q], m))
}

fn check_elliptic(a: [[f64; 2]; 2], x: [f64; 2]) -> Result<()> {
    let scale = a[0][0].abs().max(a[1][1].abs()).max(a[0][1].abs()).max(1e-300);
    if (a[0][1] - a[1][0]).abs() > 1e-12 * scale {
        return Err(Error::ModelValidation(format!(
            "diffusion coefficient not symmetric at {x:?}: {a:?}"
        )));
    }
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = (0.25 * (a[0][0] - a[1][1]).powi(2) + a[0][1] * a[1][0]).max(0.0).sqrt();
    let lmin = 0.5 * tr - disc;
    if !(lmin > 0.0) || !(det > 0.0) {
        return Err(Error::ModelValidation(format!(
            "diffusion coefficient not elliptic at {x:?}: {a:?}"
        )));
    }
    Ok(())
}

fn local_stiffness(space: &FeSpace, e: usize, coef: MatrixFn, scale: f64, m: &mut [f64]) {
    let nl = space.nloc();
    m.fill(0.0);
    for q in 0..space.n_qp() {
        let a = coef(space.qp_coord(e, q));
        let w = scale * space.qp_weight(e, q);
        let g = physical_grads(space, e, q);
        for bi in 0..nl {
            let ag = [
                a[0][0] * g[bi][0] + a[0][1] * g[bi][1],
                a[1][0] * g[bi][0] + a[1][1] * g[bi][1],
            ];
            for ai in 0..nl {
                m[ai * nl + bi] += w * (ag[0] * g[ai][0] + ag[1] * g[ai][1]);
            }
        }
    }
}

fn validate_coefficient(space: &FeSpace, coef: MatrixFn) -> Result<()> {
    for e in 0..space.n_elements() {
        for q in 0..space.n_qp() {
            let x = space.qp_coord(e, q);
            check_elliptic(coef(x), x)?;
        }
    }
    Ok(())
}

/// Interior stiffness matrix scale·∫ A∇φ_j·∇φ_i.
pub fn assemble_stiffness(space: &FeSpace, coef: MatrixFn, scale: f64) -> Result<SparseSym> {
    validate_coefficient(space, coef)?;
    let values = assemble_pattern_values(space, |e, m| local_stiffness(space, e, coef, scale, m));
    Ok(space.pattern().to_sparse(values))
}

/// Interior matrix D_ij = ∫ φ_i ∂₁φ_j (antisymmetric on interior DOFs).
pub fn assemble_dx(space: &FeSpace) -> Csr {
    let nl = space.nloc();
    let values = assemble_pattern_values(space, |e, m| {
        m.fill(0.0);
        for q in 0..space.n_qp() {
            let w = space.qp_weight(e, q);
            let phi = space.phi(q);
            let g = physical_grads(space, e, q);
            for a in 0..nl {
                for b in 0..nl {
                    m[a * nl + b] += w * phi[a] * g[b][0];
                }
            }
        }
    });
    let pat = space.pattern();
    let n = space.n_interior();
    Csr::from_parts(n, n, pat.row_ptr.clone(), pat.col_idx.clone(), values)
        .expect("pattern is valid by construction")
}

fn assemble_full(space: &FeSpace, local: impl Fn(usize, &mut [f64])) -> SparseSym {
    let nl = space.nloc();
    let mut trip = Vec::with_capacity(space.n_elements() * nl * nl);
    let mut m = vec![0.0; nl * nl];
    for e in 0..space.n_elements() {
        local(e, &mut m);
        let d = space.elem_dofs(e);
        for a in 0..nl {
            for b in 0..nl {
                trip.push((d[a], d[b], m[a * nl + b]));
            }
        }
    }
    SparseSym::from_csr_trusted(Csr::from_triplets(space.ndof(), space.ndof(), trip))
}

/// Mass matrix on all DOFs (before Dirichlet elimination).
pub fn assemble_mass_full(space: &FeSpace, weight: ScalarFn) -> SparseSym {
    assemble_full(space, |e, m| local_mass(space, e, |q| weight(space.qp_coord(e, q)), m))
}

/// Stiffness matrix on all DOFs (before Dirichlet elimination).
pub fn assemble_stiffness_full(space: &FeSpace, coef: MatrixFn, scale: f64) -> Result<SparseSym> {
    validate_coefficient(space, coef)?;
    Ok(assemble_full(space, |e, m| local_stiffness(space, e, coef, scale, m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::dense_eig_oracle;
    use crate::mesh::{Mesh, Rect};

    fn space(n: usize, order: usize) -> FeSpace {
        FeSpace::new(Mesh::new(Rect::unit_square(), n, n).unwrap(), order).unwrap()
    }

    #[test]
    fn mass_partition_of_unity() {
        for order in [1, 2] {
            let s = space(5, order);
            let m = assemble_mass_full(&s, &|_| 1.0);
            let sum: f64 = m.values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "order {order}: {sum}");
        }
        let s = FeSpace::new(Mesh::new(Rect::new(-1.0, 2.0, 0.0, 0.5), 3, 4).unwrap(), 2).unwrap();
        let sum: f64 = assemble_mass_full(&s, &|_| 1.0).values().iter().sum();
        assert!((sum - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_gives_zero_matrix() {
        let s = space(3, 1);
        assert!(assemble_mass(&s, &|_| 0.0).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_scale_linearly() {
        for order in [1, 2] {
            let s = space(4, order);
            let k = assemble_stiffness_full(&s, &|_| [[1.0, 0.0], [0.0, 1.0]], 1.0).unwrap();
            for r in 0..k.nrows() {
                let sum: f64 = k.row(r).1.iter().sum();
                assert!(sum.abs() < 1e-12);
            }
            let k1 = assemble_stiffness(&s, &|_| [[1.0, 0.0], [0.0, 1.0]], 1.0).unwrap();
            let k2 = assemble_stiffness(&s, &|_| [[2.0, 0.0], [0.0, 2.0]], 1.0).unwrap();
            for (a, b) in k1.values().iter().zip(k2.values()) {
                assert_eq!(2.0 * a, *b);
            }
        }
    }

    #[test]
    fn non_elliptic_coefficient_rejected() {
        let s = space(2, 1);
        let r = assemble_stiffness(&s, &|x| [[x[0] - 0.5, 0.0], [0.0, 1.0]], 1.0);
        assert!(matches!(r, Err(Error::ModelValidation(_))));
        let r = assemble_stiffness(&s, &|_| [[1.0, 0.5], [0.0, 1.0]], 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn assembled_matrices_symmetric() {
        let s = space(4, 2);
        assert!(s.mass().asymmetry() < 1e-15);
        assert!(s.stiffness().asymmetry() < 1e-14);
    }

    #[test]
    fn dx_is_antisymmetric_on_interior() {
        let s = space(4, 2);
        let d = assemble_dx(&s);
        let dt = d.transpose();
        let sum = d.add(1.0, &dt, 1.0);
        assert!(sum.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn smallest_laplace_eigenvalue_on_8x8() {
        let s = space(8, 1);
        let ev = dense_eig_oracle(&s.stiffness().to_dense(), &s.mass().to_dense()).unwrap();
        let two_pi2 = 2.0 * std::f64::consts::PI.powi(2);
        assert!((ev.values[0] - two_pi2).abs() / two_pi2 < 0.05);
        assert!(ev.values[0] > two_pi2);
    }

    #[test]
    fn coarse_4x4_bias() {
        let s = space(4, 1);
        let ev = dense_eig_oracle(&s.stiffness().to_dense(), &s.mass().to_dense()).unwrap();
        let two_pi2 = 2.0 * std::f64::consts::PI.powi(2);
        // Coarse-mesh bias is about 16% here; the 8x8 mesh is below 5%.
        let rel = (ev.values[0] - two_pi2) / two_pi2;
        assert!(rel > 0.15 && rel < 0.17, "{rel}");
    }

    #[test]
    fn p1_eigenvalue_converges_at_second_order() {
        let two_pi2 = 2.0 * std::f64::consts::PI.powi(2);
        let errs: Vec<f64> = [4usize, 8, 16, 32]
            .iter()
            .map(|&n| {
                let s = space(n, 1);
                let ev = dense_eig_oracle(&s.stiffness().to_dense(), &s.mass().to_dense()).unwrap();
                ev.values[0] - two_pi2
            })
            .collect();
        for w in errs[1..].windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!(slope >= 1.9, "slope {slope}");
        }
    }
}

//! Lagrange P1/P2 spaces with homogeneous Dirichlet bookkeeping.

use std::sync::OnceLock;

use crate::error::{invalid, Result};
use crate::mesh::Mesh;
use crate::quadrature::TriangleRule;
use crate::sparse::{Csr, SparseSym};

/// Marker for boundary DOFs in the full-to-interior map.
pub const NOT_INTERIOR: u32 = u32::MAX;

/// Interior sparsity pattern shared by every scalar bilinear form on a space,
/// plus the storage position of each local (a, b) pair of each element.
#[derive(Debug)]
pub struct ScalarPattern {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    /// `elem_pos[e*nloc*nloc + a*nloc + b]`, or `NOT_INTERIOR` if a or b is on the boundary.
    pub elem_pos: Vec<u32>,
}

impl ScalarPattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn to_sparse(&self, values: Vec<f64>) -> SparseSym {
        let n = self.row_ptr.len() - 1;
        let csr = Csr::from_parts(n, n, self.row_ptr.clone(), self.col_idx.clone(), values)
            .expect("pattern is valid by construction");
        SparseSym::from_csr_trusted(csr)
    }
}

#[derive(Debug)]
pub struct FeSpace {
    mesh: Mesh,
    order: usize,
    nloc: usize,
    dof_coords: Vec<[f64; 2]>,
    lattice: Vec<[usize; 2]>,
    boundary: Vec<bool>,
    elem_dofs: Vec<usize>,
    interior: Vec<usize>,
    full_to_interior: Vec<u32>,
    rule: TriangleRule,
    /// Basis values `phi[q*nloc + a]`.
    phi: Vec<f64>,
    /// Reference gradients `dphi_ref[q*nloc + a]`.
    dphi_ref: Vec<[f64; 2]>,
    /// Per element: inverse-transposed Jacobian rows and area.
    geometry: Vec<ElementGeometry>,
    pattern: OnceLock<ScalarPattern>,
    mass: OnceLock<SparseSym>,
    stiffness: OnceLock<SparseSym>,
}

#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub jinv_t: [[f64; 2]; 2],
    pub area: f64,
}

impl ElementGeometry {
    pub fn physical_grad(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.jinv_t[0][0] * g[0] + self.jinv_t[0][1] * g[1],
            self.jinv_t[1][0] * g[0] + self.jinv_t[1][1] * g[1],
        ]
    }
}

/// Reference basis values and gradients (in ξ = (λ2, λ3)) at barycentric point `l`.
fn reference_basis(order: usize, l: [f64; 3]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let grad_l = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
    match order {
        1 => (l.to_vec(), grad_l.to_vec()),
        2 => {
            let mut v = Vec::with_capacity(6);
            let mut g = Vec::with_capacity(6);
            for a in 0..3 {
                v.push(l[a] * (2.0 * l[a] - 1.0));
                let s = 4.0 * l[a] - 1.0;
                g.push([s * grad_l[a][0], s * grad_l[a][1]]);
            }
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                v.push(4.0 * l[a] * l[b]);
                g.push([
                    4.0 * (l[b] * grad_l[a][0] + l[a] * grad_l[b][0]),
                    4.0 * (l[b] * grad_l[a][1] + l[a] * grad_l[b][1]),
                ]);
            }
            (v, g)
        }
        _ => unreachable!(),
    }
}

impl FeSpace {
    pub fn new(mesh: Mesh, order: usize) -> Result<Self> {
        if order != 1 && order != 2 {
            return invalid(format!("unsupported polynomial order {order}"));
        }
        let (nx, ny) = (mesh.nx(), mesh.ny());
        let nv = (nx + 1) * (ny + 1);
        let nh = nx * (ny + 1);
        let nvert_edges = (nx + 1) * ny;
        let nd = nx * ny;
        let ndof = if order == 1 { nv } else { nv + nh + nvert_edges + nd };
        let nloc = if order == 1 { 3 } else { 6 };
        let (hx, hy) = (mesh.hx(), mesh.hy());
        let r = mesh.rect();

        let mut lattice = vec![[0usize; 2]; ndof];
        let k = order;
        for j in 0..=ny {
            for i in 0..=nx {
                lattice[j * (nx + 1) + i] = [k * i, k * j];
            }
        }
        if order == 2 {
            for j in 0..=ny {
                for i in 0..nx {
                    lattice[nv + j * nx + i] = [2 * i + 1, 2 * j];
                }
            }
            for j in 0..ny {
                for i in 0..=nx {
                    lattice[nv + nh + j * (nx + 1) + i] = [2 * i, 2 * j + 1];
                }
            }
            for j in 0..ny {
                for i in 0..nx {
                    lattice[nv + nh + nvert_edges + j * nx + i] = [2 * i + 1, 2 * j + 1];
                }
            }
        }
        let (lx, ly) = (k * nx, k * ny);
        let dof_coords: Vec<[f64; 2]> = lattice
            .iter()
            .map(|&[a, b]| {
                [
                    r.x0 + a as f64 * hx / k as f64,
                    r.y0 + b as f64 * hy / k as f64,
                ]
            })
            .collect();
        let boundary: Vec<bool> = lattice
            .iter()
            .map(|&[a, b]| a == 0 || b == 0 || a == lx || b == ly)
            .collect();

        let mut elem_dofs = Vec::with_capacity(2 * nx * ny * nloc);
        for j in 0..ny {
            for i in 0..nx {
                let v00 = j * (nx + 1) + i;
                let (v10, v01) = (v00 + 1, v00 + nx + 1);
                let v11 = v01 + 1;
                let hedge = |ii: usize, jj: usize| nv + jj * nx + ii;
                let vedge = |ii: usize, jj: usize| nv + nh + jj * (nx + 1) + ii;
                let dedge = nv + nh + nvert_edges + j * nx + i;
                // lower: (v00, v10, v11); edges 01, 12, 20
                elem_dofs.extend([v00, v10, v11]);
                if order == 2 {
                    elem_dofs.extend([hedge(i, j), vedge(i + 1, j), dedge]);
                }
                // upper: (v00, v11, v01)
                elem_dofs.extend([v00, v11, v01]);
                if order == 2 {
                    elem_dofs.extend([dedge, hedge(i, j + 1), vedge(i, j)]);
                }
            }
        }

        let mut interior = Vec::new();
        let mut full_to_interior = vec![NOT_INTERIOR; ndof];
        for d in 0..ndof {
            if !boundary[d] {
                full_to_interior[d] = interior.len() as u32;
                interior.push(d);
            }
        }

        let rule = TriangleRule::degree6();
        let mut phi = Vec::with_capacity(rule.len() * nloc);
        let mut dphi_ref = Vec::with_capacity(rule.len() * nloc);
        for l in &rule.points {
            let (v, g) = reference_basis(order, *l);
            phi.extend(v);
            dphi_ref.extend(g);
        }

        let geometry = mesh
            .triangles()
            .iter()
            .map(|t| {
                let [p0, p1, p2] = t.map(|v| mesh.vertices()[v]);
                let j = [[p1[0] - p0[0], p2[0] - p0[0]], [p1[1] - p0[1], p2[1] - p0[1]]];
                let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                // J^{-T} = (1/det) [[j11, -j10], [-j01, j00]]
                let jinv_t = [
                    [j[1][1] / det, -j[1][0] / det],
                    [-j[0][1] / det, j[0][0] / det],
                ];
                ElementGeometry {
                    jinv_t,
                    area: 0.5 * det,
                }
            })
            .collect();

        Ok(Self {
            mesh,
            order,
            nloc,
            dof_coords,
            lattice,
            boundary,
            elem_dofs,
            interior,
            full_to_interior,
            rule,
            phi,
            dphi_ref,
            geometry,
            pattern: OnceLock::new(),
            mass: OnceLock::new(),
            stiffness: OnceLock::new(),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn nloc(&self) -> usize {
        self.nloc
    }
    pub fn ndof(&self) -> usize {
        self.dof_coords.len()
    }
    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }
    pub fn n_elements(&self) -> usize {
        self.mesh.triangles().len()
    }
    pub fn dof_coords(&self) -> &[[f64; 2]] {
        &self.dof_coords
    }
    /// Position of each DOF on the (order·nx+1)×(order·ny+1) lattice.
    pub fn lattice(&self) -> &[[usize; 2]] {
        &self.lattice
    }
    pub fn lattice_dims(&self) -> [usize; 2] {
        [self.order * self.mesh.nx() + 1, self.order * self.mesh.ny() + 1]
    }
    pub fn is_boundary(&self, dof: usize) -> bool {
        self.boundary[dof]
    }
    pub fn interior_dofs(&self) -> &[usize] {
        &self.interior
    }
    pub fn full_to_interior(&self) -> &[u32] {
        &self.full_to_interior
    }
    pub fn elem_dofs(&self, e: usize) -> &[usize] {
        &self.elem_dofs[e * self.nloc..(e + 1) * self.nloc]
    }
    pub fn geometry(&self, e: usize) -> &ElementGeometry {
        &self.geometry[e]
    }
    pub fn rule(&self) -> &TriangleRule {
        &self.rule
    }
    pub fn n_qp(&self) -> usize {
        self.rule.len()
    }
    /// Basis values at quadrature point q (length nloc).
    pub fn phi(&self, q: usize) -> &[f64] {
        &self.phi[q * self.nloc..(q + 1) * self.nloc]
    }
    pub fn dphi_ref(&self, q: usize) -> &[[f64; 2]] {
        &self.dphi_ref[q * self.nloc..(q + 1) * self.nloc]
    }

    /// Physical coordinates of quadrature point q of element e.
    pub fn qp_coord(&self, e: usize, q: usize) -> [f64; 2] {
        let t = self.mesh.triangles()[e];
        let l = self.rule.points[q];
        let v = self.mesh.vertices();
        [
            l[0] * v[t[0]][0] + l[1] * v[t[1]][0] + l[2] * v[t[2]][0],
            l[0] * v[t[0]][1] + l[1] * v[t[1]][1] + l[2] * v[t[2]][1],
        ]
    }

    /// Quadrature weight (area-scaled) of point q on element e.
    pub fn qp_weight(&self, e: usize, q: usize) -> f64 {
        self.rule.weights[q] * self.geometry[e].area
    }

    /// Values of the local basis at an arbitrary barycentric point.
    pub fn basis_at(&self, bary: [f64; 3]) -> Vec<f64> {
        reference_basis(self.order, bary).0
    }

    /// Interior indices of the local DOFs of element e.
    pub fn local_interior(&self, e: usize) -> impl Iterator<Item = u32> + '_ {
        self.elem_dofs(e).iter().map(|&d| self.full_to_interior[d])
    }

    pub fn pattern(&self) -> &ScalarPattern {
        self.pattern.get_or_init(|| self.build_pattern())
    }

    /// Interior mass matrix (weight 1), cached.
    pub fn mass(&self) -> &SparseSym {
        self.mass
            .get_or_init(|| crate::assembly::assemble_mass(self, &|_| 1.0))
    }

    /// Interior stiffness matrix of -Δ (A = I, scale 1), cached.
    pub fn stiffness(&self) -> &SparseSym {
        self.stiffness.get_or_init(|| {
            crate::assembly::assemble_stiffness(self, &|_| [[1.0, 0.0], [0.0, 1.0]], 1.0)
                .expect("identity coefficient is elliptic")
        })
    }

    fn build_pattern(&self) -> ScalarPattern {
        let n = self.n_interior();
        let nl = self.nloc;
        let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(self.n_elements() * nl * nl);
        for e in 0..self.n_elements() {
            let li: Vec<u32> = self.local_interior(e).collect();
            for &a in &li {
                if a == NOT_INTERIOR {
                    continue;
                }
                for &b in &li {
                    if b != NOT_INTERIOR {
                        pairs.push((a, b));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(pairs.len());
        for &(r, c) in &pairs {
            row_ptr[r as usize + 1] += 1;
            col_idx.push(c);
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut elem_pos = vec![NOT_INTERIOR; self.n_elements() * nl * nl];
        for e in 0..self.n_elements() {
            let li: Vec<u32> = self.local_interior(e).collect();
            for (a, &ra) in li.iter().enumerate() {
                if ra == NOT_INTERIOR {
                    continue;
                }
                let (s, t) = (row_ptr[ra as usize], row_ptr[ra as usize + 1]);
                for (b, &cb) in li.iter().enumerate() {
                    if cb == NOT_INTERIOR {
                        continue;
                    }
                    let k = s + col_idx[s..t].binary_search(&cb).expect("pair present");
                    elem_pos[e * nl * nl + a * nl + b] = k as u32;
                }
            }
        }
        ScalarPattern {
            row_ptr,
            col_idx,
            elem_pos,
        }
    }

    /// Expands an interior coefficient vector (one scalar slot) to all DOFs.
    pub fn extend_scalar(&self, interior: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.ndof()];
        for (k, &d) in self.interior.iter().enumerate() {
            full[d] = interior[k];
        }
        full
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Rect;

    #[test]
    fn dof_counts() {
        let m = Mesh::new(Rect::unit_square(), 5, 5).unwrap();
        let p1 = FeSpace::new(m.clone(), 1).unwrap();
        assert_eq!(p1.ndof(), 36);
        assert_eq!(p1.n_interior(), 16);
        let p2 = FeSpace::new(m, 2).unwrap();
        // vertices + edges: 36 + (5*6 + 6*5 + 25)
        assert_eq!(p2.ndof(), 36 + 85);
        assert_eq!(p2.n_interior(), 9 * 9);
    }

    #[test]
    fn reference_resolution_interior_count() {
        let m = Mesh::new(Rect::centered_square(1.0), 128, 128).unwrap();
        let p2 = FeSpace::new(m, 2).unwrap();
        assert_eq!(p2.n_interior(), 255 * 255);
    }

    #[test]
    fn p2_nodal_property() {
        let m = Mesh::new(Rect::new(0.0, 2.0, -1.0, 0.5), 3, 2).unwrap();
        let s = FeSpace::new(m, 2).unwrap();
        let nodes = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.5, 0.5, 0.0],
            [0.0, 0.5, 0.5],
            [0.5, 0.0, 0.5],
        ];
        for (a, l) in nodes.iter().enumerate() {
            let v = s.basis_at(*l);
            for (b, vb) in v.iter().enumerate() {
                assert!((vb - if a == b { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        // Local DOF coordinates agree with the nodes' physical positions.
        for e in 0..s.n_elements() {
            let t = s.mesh().triangles()[e];
            let v = s.mesh().vertices();
            for (a, l) in nodes.iter().enumerate() {
                let x = [
                    l[0] * v[t[0]][0] + l[1] * v[t[1]][0] + l[2] * v[t[2]][0],
                    l[0] * v[t[0]][1] + l[1] * v[t[1]][1] + l[2] * v[t[2]][1],
                ];
                let d = s.elem_dofs(e)[a];
                let y = s.dof_coords()[d];
                assert!((x[0] - y[0]).abs() < 1e-14 && (x[1] - y[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reference_gradients_sum_to_zero() {
        let m = Mesh::new(Rect::unit_square(), 2, 2).unwrap();
        for order in [1, 2] {
            let s = FeSpace::new(m.clone(), order).unwrap();
            for q in 0..s.n_qp() {
                let g = s.dphi_ref(q).iter().fold([0.0, 0.0], |acc, g| [acc[0] + g[0], acc[1] + g[1]]);
                assert!(g[0].abs() < 1e-14 && g[1].abs() < 1e-14);
                let v: f64 = s.phi(q).iter().sum();
                assert!((v - 1.0).abs() < 1e-14);
            }
        }
    }
}

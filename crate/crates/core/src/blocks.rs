//! Real block operators built from scalar matrices sharing one sparsity pattern.

use crate::field::Layout;
use crate::sparse::{Csr, SparseSym};

/// Block sparsity over the slots of a [`Layout`], each present block having
/// the scalar pattern. `maps[s*slots + t][k]` is the storage position of scalar
/// entry k inside block (s, t).
#[derive(Debug, Clone)]
pub struct BlockPattern {
    layout: Layout,
    pattern: Csr,
    maps: Vec<Vec<u32>>,
}

impl BlockPattern {
    /// `coupled(s, t)` says whether block (s, t) is present; it must be symmetric.
    pub fn new(
        scalar_row_ptr: &[usize],
        scalar_col_idx: &[u32],
        layout: Layout,
        coupled: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let n = layout.n;
        let ns = layout.slots();
        let np = layout.flavor.parts();
        let nc = layout.flavor.components();
        let nnz_s = scalar_col_idx.len();
        let mut maps = vec![Vec::new(); ns * ns];
        for s in 0..ns {
            for t in 0..ns {
                assert_eq!(coupled(s, t), coupled(t, s), "block coupling must be symmetric");
                if coupled(s, t) {
                    maps[s * ns + t] = vec![u32::MAX; nnz_s];
                }
            }
        }
        let dim = layout.dim();
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx: Vec<u32> = Vec::new();
        for c in 0..nc {
            for i in 0..n {
                for p in 0..np {
                    let s = c * np + p;
                    let r = layout.index(c, i, p);
                    for c2 in 0..nc {
                        for k in scalar_row_ptr[i]..scalar_row_ptr[i + 1] {
                            let j = scalar_col_idx[k] as usize;
                            for p2 in 0..np {
                                let t = c2 * np + p2;
                                if coupled(s, t) {
                                    maps[s * ns + t][k] = col_idx.len() as u32;
                                    col_idx.push(layout.index(c2, j, p2) as u32);
                                }
                            }
                        }
                    }
                    row_ptr[r + 1] = col_idx.len();
                }
            }
        }
        // Rows were visited in index order, so row_ptr is already cumulative.
        let values = vec![0.0; col_idx.len()];
        let pattern = Csr::from_parts(dim, dim, row_ptr, col_idx, values)
            .expect("block pattern is valid by construction");
        Self {
            layout,
            pattern,
            maps,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    pub fn is_coupled(&self, s: usize, t: usize) -> bool {
        !self.maps[s * self.layout.slots() + t].is_empty()
    }

    /// values[block (s,t)] += coef · scalar
    pub fn add_block(&self, values: &mut [f64], s: usize, t: usize, coef: f64, scalar: &[f64]) {
        let map = &self.maps[s * self.layout.slots() + t];
        assert!(!map.is_empty(), "block ({s},{t}) not in pattern");
        for (pos, v) in map.iter().zip(scalar) {
            values[*pos as usize] += coef * v;
        }
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.nnz()]
    }

    /// Wraps values as a symmetric matrix; callers fill transposed blocks consistently.
    pub fn to_sparse(&self, values: Vec<f64>) -> SparseSym {
        SparseSym::from_csr_trusted(self.pattern.with_values(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Flavor;

    #[test]
    fn spinor_pattern_matches_dense_assembly() {
        // scalar 2x2 pattern, full
        let rp = [0usize, 2, 4];
        let ci = [0u32, 1, 0, 1];
        let scal = [1.0, 2.0, 2.0, 5.0];
        let layout = Layout::new(Flavor::ComplexSpinor, 2);
        let np = 2;
        let bp = BlockPattern::new(&rp, &ci, layout, |s, t| s / np == t / np || s % np == t % np);
        let mut v = bp.zeros();
        for s in 0..4 {
            bp.add_block(&mut v, s, s, 1.0, &scal);
        }
        bp.add_block(&mut v, 0, 2, 3.0, &scal);
        bp.add_block(&mut v, 2, 0, 3.0, &scal);
        let a = bp.to_sparse(v);
        assert!(a.asymmetry() == 0.0);
        // (c=0,i=1,re) × (c=1,i=0,re) = 3·scal[1][0]
        assert_eq!(a.get(layout.index(0, 1, 0), layout.index(1, 0, 0)), 6.0);
        assert_eq!(a.get(layout.index(0, 1, 1), layout.index(0, 1, 1)), 5.0);
        // re-im within a component is structurally present but zero
        assert!(a.position(layout.index(0, 0, 0), layout.index(0, 0, 1)).is_some());
        assert!(a.position(layout.index(0, 0, 0), layout.index(1, 0, 1)).is_none());
    }
}

//! Sparse Cholesky factorization (up-looking, elimination-tree based) with a
//! geometric nested-dissection ordering for lattice-structured DOFs.

use crate::cg::Preconditioner;
use crate::error::{invalid, Error, Result};
use crate::sparse::SparseSym;

/// A = Pᵀ L Lᵀ P with L lower triangular stored by columns, diagonal first.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    /// perm[k] = original index placed at position k.
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseCholesky {
    /// Factors `a` under the ordering `perm` (identity when `None`).
    pub fn factor(a: &SparseSym, perm: Option<Vec<usize>>) -> Result<Self> {
        let n = a.dim();
        let perm = perm.unwrap_or_else(|| (0..n).collect());
        if perm.len() != n {
            return invalid("permutation length differs from matrix dimension");
        }
        let mut inv = vec![usize::MAX; n];
        for (k, &p) in perm.iter().enumerate() {
            if p >= n || inv[p] != usize::MAX {
                return invalid("ordering is not a permutation");
            }
            inv[p] = k;
        }

        // Lower triangle of C = P A Pᵀ by rows.
        let mut cnt = vec![0usize; n + 1];
        for (i, &pi) in inv.iter().enumerate() {
            let (cols, _) = a.row(i);
            for &j in cols {
                let pj = inv[j as usize];
                if pj <= pi {
                    cnt[pi + 1] += 1;
                }
            }
        }
        for k in 0..n {
            cnt[k + 1] += cnt[k];
        }
        let c_ptr = cnt.clone();
        let mut c_idx = vec![0u32; c_ptr[n]];
        let mut c_val = vec![0.0; c_ptr[n]];
        let mut next = cnt;
        for (i, &pi) in inv.iter().enumerate() {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let pj = inv[j as usize];
                if pj <= pi {
                    let p = next[pi];
                    c_idx[p] = pj as u32;
                    c_val[p] = v;
                    next[pi] += 1;
                }
            }
        }

        // Elimination tree.
        let mut parent = vec![usize::MAX; n];
        let mut ancestor = vec![usize::MAX; n];
        for k in 0..n {
            for &i in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
                let mut i = i as usize;
                while i != usize::MAX && i < k {
                    let next_i = ancestor[i];
                    ancestor[i] = k;
                    if next_i == usize::MAX {
                        parent[i] = k;
                    }
                    i = next_i;
                }
            }
        }

        // Column counts from the row patterns.
        let mut mark = vec![usize::MAX; n];
        let mut stack = vec![0usize; n];
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(&c_ptr, &c_idx, k, &parent, &mut mark, &mut stack);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + counts[k];
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0u32; nnz];
        let mut values = vec![0.0; nnz];
        let mut fill = col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        mark.iter_mut().for_each(|m| *m = usize::MAX);

        for k in 0..n {
            let top = ereach(&c_ptr, &c_idx, k, &parent, &mut mark, &mut stack);
            for p in c_ptr[k]..c_ptr[k + 1] {
                x[c_idx[p] as usize] += c_val[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / values[col_ptr[i]];
                x[i] = 0.0;
                for p in col_ptr[i] + 1..fill[i] {
                    x[row_idx[p] as usize] -= values[p] * lki;
                }
                d -= lki * lki;
                let p = fill[i];
                row_idx[p] = k as u32;
                values[p] = lki;
                fill[i] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Indefinite(format!(
                    "Cholesky pivot {d:e} at step {k} of {n}"
                )));
            }
            let p = fill[k];
            row_idx[p] = k as u32;
            values[p] = d.sqrt();
            fill[k] += 1;
        }
        Ok(Self {
            n,
            perm,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn solve_into(&self, b: &[f64], x: &mut [f64]) {
        let n = self.n;
        let values = &self.values;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for j in 0..n {
            let (s, e) = (self.col_ptr[j], self.col_ptr[j + 1]);
            y[j] /= values[s];
            let yj = y[j];
            for p in s + 1..e {
                y[self.row_idx[p] as usize] -= values[p] * yj;
            }
        }
        for j in (0..n).rev() {
            let (s, e) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let mut acc = y[j];
            for p in s + 1..e {
                acc -= values[p] * y[self.row_idx[p] as usize];
            }
            y[j] = acc / values[s];
        }
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        self.solve_into(b, &mut x);
        x
    }
}

/// Pattern of row k of L (excluding the diagonal) in topological order, as
/// `stack[top..n]`.
fn ereach(
    c_ptr: &[usize],
    c_idx: &[u32],
    k: usize,
    parent: &[usize],
    mark: &mut [usize],
    stack: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    for &i in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
        let mut i = i as usize;
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Scaled inverse of a factor, used as a CG preconditioner: z = s·A⁻¹r.
pub struct FactorPrecond<'a> {
    pub factor: &'a SparseCholesky,
    pub scale: f64,
}

impl Preconditioner for FactorPrecond<'_> {
    fn apply_into(&self, r: &[f64], z: &mut [f64]) {
        self.factor.solve_into(r, z);
        if self.scale != 1.0 {
            z.iter_mut().for_each(|v| *v *= self.scale);
        }
    }
}

/// Nested-dissection order of lattice nodes. `coords` are integer lattice
/// positions; separators are placed on lines that are multiples of `stride`
/// so that no element straddles them. Every node carries `group` consecutive
/// unknowns, and node `v`'s unknowns are `unknown(v, g)`.
pub fn nested_dissection(
    coords: &[[u32; 2]],
    stride: u32,
    group: usize,
    unknown: impl Fn(usize, usize) -> usize,
) -> Vec<usize> {
    let mut order_nodes = Vec::with_capacity(coords.len());
    let ids: Vec<usize> = (0..coords.len()).collect();
    dissect(coords, stride.max(1), ids, &mut order_nodes);
    let mut perm = Vec::with_capacity(coords.len() * group);
    for v in order_nodes {
        for g in 0..group {
            perm.push(unknown(v, g));
        }
    }
    perm
}

fn dissect(coords: &[[u32; 2]], stride: u32, ids: Vec<usize>, out: &mut Vec<usize>) {
    if ids.len() <= 48 {
        out.extend(ids);
        return;
    }
    let bounds = |d: usize| {
        ids.iter().fold((u32::MAX, 0u32), |(lo, hi), &v| {
            (lo.min(coords[v][d]), hi.max(coords[v][d]))
        })
    };
    let (bx, by) = (bounds(0), bounds(1));
    let d = if bx.1 - bx.0 >= by.1 - by.0 { 0 } else { 1 };
    let (lo, hi) = if d == 0 { bx } else { by };
    let mid = (lo + hi) / 2;
    let mut cut = mid - mid % stride;
    if cut <= lo {
        cut += stride;
    }
    if cut >= hi {
        out.extend(ids);
        return;
    }
    let (mut left, mut right, mut sep) = (Vec::new(), Vec::new(), Vec::new());
    for v in ids {
        match coords[v][d].cmp(&cut) {
            std::cmp::Ordering::Less => left.push(v),
            std::cmp::Ordering::Greater => right.push(v),
            std::cmp::Ordering::Equal => sep.push(v),
        }
    }
    dissect(coords, stride, left, out);
    dissect(coords, stride, right, out);
    out.extend(sep);
}

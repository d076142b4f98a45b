//! Compressed sparse row storage for real operators.

use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

/// Rows per rayon task in matrix-vector products.
const ROW_CHUNK: usize = 4096;

/// General real CSR matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from raw parts. Column indices in each row must be strictly increasing.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != nrows + 1 || row_ptr[0] != 0 || *row_ptr.last().unwrap() != col_idx.len()
        {
            return invalid("inconsistent row pointer");
        }
        if col_idx.len() != values.len() {
            return invalid("column/value length mismatch");
        }
        for r in 0..nrows {
            let cols = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("row {r} has unsorted or duplicate columns"));
            }
            if cols.last().is_some_and(|&c| c as usize >= ncols) {
                return invalid(format!("row {r} has a column out of range"));
            }
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from (row, col, value) triplets; duplicates are summed, explicit zeros kept.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx: Vec<u32> = Vec::with_capacity(trip.len());
        let mut values: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of range");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c as u32);
                values.push(v);
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }
    pub fn ncols(&self) -> usize {
        self.ncols
    }
    pub fn nnz(&self) -> usize {
        self.values.len()
    }
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }
    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.nnz());
        Self {
            values,
            ..self.clone_pattern()
        }
    }

    fn clone_pattern(&self) -> Self {
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: Vec::new(),
        }
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    /// Storage position of entry (r, c), if present in the pattern.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[a..b]
            .binary_search(&(c as u32))
            .ok()
            .map(|k| a + k)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |k| self.values[k])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// y = A x
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        let row_kernel = |r: usize| {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut s = 0.0;
            for k in a..b {
                s += self.values[k] * x[self.col_idx[k] as usize];
            }
            s
        };
        if self.nrows >= 2 * ROW_CHUNK && rayon::current_num_threads() > 1 {
            y.par_chunks_mut(ROW_CHUNK)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let base = ci * ROW_CHUNK;
                    for (i, yi) in chunk.iter_mut().enumerate() {
                        *yi = row_kernel(base + i);
                    }
                });
        } else {
            for (r, yi) in y.iter_mut().enumerate() {
                *yi = row_kernel(r);
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    /// y = Aᵀ x
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k] as usize] += self.values[k] * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k] as usize;
                let dst = next[c];
                next[c] += 1;
                col_idx[dst] = r as u32;
                values[dst] = self.values[k];
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Sparse product self * other.
    pub fn matmul(&self, other: &Csr) -> Csr {
        assert_eq!(self.ncols, other.nrows);
        let n = other.ncols;
        let mut marker = vec![usize::MAX; n];
        let mut acc = vec![0.0; n];
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut cols: Vec<u32> = Vec::new();
        for r in 0..self.nrows {
            cols.clear();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let mid = self.col_idx[k] as usize;
                let a = self.values[k];
                for kk in other.row_ptr[mid]..other.row_ptr[mid + 1] {
                    let c = other.col_idx[kk] as usize;
                    if marker[c] != r {
                        marker[c] = r;
                        acc[c] = 0.0;
                        cols.push(c as u32);
                    }
                    acc[c] += a * other.values[kk];
                }
            }
            cols.sort_unstable();
            for &c in &cols {
                col_idx.push(c);
                values.push(acc[c as usize]);
            }
            row_ptr[r + 1] = col_idx.len();
        }
        Csr {
            nrows: self.nrows,
            ncols: n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Entrywise alpha*self + beta*other; patterns are merged.
    pub fn add(&self, alpha: f64, other: &Csr, beta: f64) -> Csr {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut values = Vec::with_capacity(self.nnz().max(other.nnz()));
        for r in 0..self.nrows {
            let (ca, va) = self.row(r);
            let (cb, vb) = other.row(r);
            let (mut i, mut j) = (0, 0);
            while i < ca.len() || j < cb.len() {
                let take_a = j >= cb.len() || (i < ca.len() && ca[i] < cb[j]);
                let take_b = i >= ca.len() || (j < cb.len() && cb[j] < ca[i]);
                if take_a {
                    col_idx.push(ca[i]);
                    values.push(alpha * va[i]);
                    i += 1;
                } else if take_b {
                    col_idx.push(cb[j]);
                    values.push(beta * vb[j]);
                    j += 1;
                } else {
                    col_idx.push(ca[i]);
                    values.push(alpha * va[i] + beta * vb[j]);
                    i += 1;
                    j += 1;
                }
            }
            row_ptr[r + 1] = col_idx.len();
        }
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Submatrix with the given row and column index lists (each in new order).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Csr {
        let mut col_map = vec![u32::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k as u32;
        }
        let mut row_ptr = vec![0usize; rows.len() + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut buf: Vec<(u32, f64)> = Vec::new();
        for (nr, &r) in rows.iter().enumerate() {
            buf.clear();
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                let m = col_map[c as usize];
                if m != u32::MAX {
                    buf.push((m, v));
                }
            }
            buf.sort_unstable_by_key(|p| p.0);
            for &(c, v) in &buf {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr[nr + 1] = col_idx.len();
        }
        Csr {
            nrows: rows.len(),
            ncols: cols.len(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                d[(r, c as usize)] += v;
            }
        }
        d
    }

    /// Largest |a_ij - a_ji| relative to the largest |a_ij|; infinite if the
    /// pattern is not structurally symmetric or the matrix is not square.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                match self.position(c as usize, r) {
                    Some(k) => worst = worst.max((v - self.values[k]).abs()),
                    None => return f64::INFINITY,
                }
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    /// Writes MatrixMarket coordinate format (general, real, 1-based).
    pub fn write_matrix_market(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "%%MatrixMarket matrix coordinate real general").map_err(io)?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz()).map_err(io)?;
        for r in 0..self.nrows {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                writeln!(w, "{} {} {:.17e}", r + 1, c + 1, v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

/// Symmetric tolerance used when a matrix is promoted to [`SparseSym`].
pub const SYMMETRY_TOL: f64 = 1e-13;

/// Square CSR matrix whose symmetry has been established, either by an
/// explicit check or by construction from symmetric element contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    csr: Csr,
    symmetry_checked: bool,
}

impl SparseSym {
    /// Promotes after checking a_ij = a_ji within [`SYMMETRY_TOL`] relative.
    pub fn from_csr(csr: Csr) -> Result<Self> {
        let asym = csr.asymmetry();
        if asym > SYMMETRY_TOL {
            return invalid(format!("matrix is not symmetric (relative asymmetry {asym:.3e})"));
        }
        Ok(Self {
            csr,
            symmetry_checked: true,
        })
    }

    /// Promotes without checking; the caller guarantees symmetry by construction.
    pub(crate) fn from_csr_trusted(csr: Csr) -> Self {
        debug_assert_eq!(csr.nrows(), csr.ncols());
        Self {
            csr,
            symmetry_checked: false,
        }
    }

    pub fn from_triplets(n: usize, trip: Vec<(usize, usize, f64)>) -> Result<Self> {
        Self::from_csr(Csr::from_triplets(n, n, trip))
    }

    pub fn identity(n: usize) -> Self {
        Self {
            csr: Csr::identity(n),
            symmetry_checked: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.csr.nrows()
    }

    pub fn symmetry_checked(&self) -> bool {
        self.symmetry_checked
    }

    pub fn csr(&self) -> &Csr {
        &self.csr
    }

    pub fn into_csr(self) -> Csr {
        self.csr
    }

    /// Same pattern, new values; symmetric by the caller's construction.
    pub(crate) fn with_values_trusted(&self, values: Vec<f64>) -> Self {
        Self::from_csr_trusted(self.csr.with_values(values))
    }

    /// x ↦ xᵀ A x
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        crate::vecops::dot(&self.matvec(x), x)
    }

    /// Galerkin triple product Bᵀ A B.
    pub fn galerkin(&self, b: &Csr) -> SparseSym {
        let bt = b.transpose();
        let ab = self.csr.matmul(b);
        let mut c = bt.matmul(&ab);
        symmetrize_values(&mut c);
        SparseSym::from_csr_trusted(c)
    }

    pub fn scaled_sum(&self, alpha: f64, other: &SparseSym, beta: f64) -> SparseSym {
        SparseSym::from_csr_trusted(self.csr.add(alpha, &other.csr, beta))
    }
}

/// Replaces a structurally symmetric matrix by ½(A + Aᵀ) to remove rounding asymmetry.
fn symmetrize_values(c: &mut Csr) {
    let n = c.nrows();
    let mut vals = c.values().to_vec();
    for r in 0..n {
        for k in c.row_ptr()[r]..c.row_ptr()[r + 1] {
            let col = c.col_idx()[k] as usize;
            if col > r {
                if let Some(kt) = c.position(col, r) {
                    let avg = 0.5 * (vals[k] + vals[kt]);
                    vals[k] = avg;
                    vals[kt] = avg;
                }
            }
        }
    }
    c.values_mut().copy_from_slice(&vals);
}

impl Deref for SparseSym {
    type Target = Csr;
    fn deref(&self) -> &Csr {
        &self.csr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_keep_zeros() {
        let a = Csr::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, 0.0), (0, 1, 4.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.position(1, 0), Some(2));
        assert_eq!(a.get(1, 1), 0.0);
    }

    #[test]
    fn transpose_and_matmul_match_dense() {
        let a = Csr::from_triplets(3, 2, vec![(0, 0, 1.0), (1, 1, 2.0), (2, 0, -1.0), (2, 1, 3.0)]);
        let b = Csr::from_triplets(2, 3, vec![(0, 2, 5.0), (1, 0, 1.0), (1, 1, -2.0)]);
        let prod = a.matmul(&b).to_dense();
        let expect = a.to_dense() * b.to_dense();
        assert!((prod - expect).abs().max() < 1e-15);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
    }

    #[test]
    fn symmetric_promotion_rejects_asymmetric() {
        let a = Csr::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.5)]);
        assert!(SparseSym::from_csr(a).is_err());
        let b = Csr::from_triplets(2, 2, vec![(0, 1, 1.0)]);
        assert!(SparseSym::from_csr(b).is_err());
    }

    #[test]
    fn add_and_submatrix() {
        let a = Csr::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 2.0)]);
        let b = Csr::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 1, 1.0)]);
        let c = a.add(2.0, &b, -1.0);
        assert_eq!(c.get(0, 0), 2.0);
        assert_eq!(c.get(0, 1), -1.0);
        assert_eq!(c.get(1, 1), 3.0);
        let s = c.submatrix(&[1], &[1, 0]);
        assert_eq!(s.get(0, 0), 3.0);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn matrix_market_roundtrip_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mtx");
        SparseSym::identity(3).write_matrix_market(&p).unwrap();
        let txt = std::fs::read_to_string(&p).unwrap();
        assert!(txt.starts_with("%%MatrixMarket matrix coordinate real general\n3 3 3\n"));
    }
}

//! Compressed sparse row matrices for adjacency structure and sparse features.
//!
//! Values are `f64`. Entries within a row are kept sorted by column and
//! explicit zeros are allowed (a stored zero is still an entry). The format
//! is the usual `row_ptr` / `col_idx` / `values` triple.

use crate::error::{Error, Result};
use crate::tensor::Dense;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` entries.
    ///
    /// Entries may arrive in any order; duplicates (same row and column) are
    /// rejected. Indices must be in range and values finite.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        Self::build(rows, cols, entries, false)
    }

    /// Like [`SparseMatrix::from_entries`] but duplicate positions collapse
    /// to the entry with the maximum value instead of erroring.
    ///
    /// Handy for edge lists that repeat an edge and for unions of directed
    /// kNN selections.
    pub fn from_entries_collapse_max(
        rows: usize,
        cols: usize,
        entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        Self::build(rows, cols, entries, true)
    }

    fn build(
        rows: usize,
        cols: usize,
        mut entries: Vec<(usize, usize, f64)>,
        collapse_max: bool,
    ) -> Result<Self> {
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::Sparse(format!(
                    "entry ({r}, {c}) out of bounds for {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Sparse(format!("entry ({r}, {c}) has non-finite value {v}")));
            }
        }
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(
            // Order equal positions by value so `dedup_by` keeps the maximum.
            a.2.partial_cmp(&b.2).expect("finite values compare"),
        ));
        if collapse_max {
            // Keep the last of each run, which is the maximum after sorting.
            let mut deduped: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
            for e in entries {
                match deduped.last_mut() {
                    Some(last) if last.0 == e.0 && last.1 == e.1 => *last = e,
                    _ => deduped.push(e),
                }
            }
            entries = deduped;
        } else if let Some(w) = entries.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::Sparse(format!(
                "duplicate entry at ({}, {})",
                w[0].0, w[0].1
            )));
        }

        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let (col_idx, values) = entries.into_iter().map(|(_, c, v)| (c, v)).unzip();
        Ok(SparseMatrix { rows, cols, row_ptr, col_idx, values })
    }

    /// The `n` by `n` identity.
    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Converts a dense matrix, storing only entries with nonzero value.
    pub fn from_dense(d: &Dense) -> Self {
        let (rows, cols) = d.dim();
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let v = d[[i, j]];
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr[i + 1] = col_idx.len();
        }
        SparseMatrix { rows, cols, row_ptr, col_idx, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// Value at `(i, j)`, zero when the position is not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    /// Iterates stored entries as `(row, col, value)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&c, &v)| (i, c, v))
        })
    }

    pub fn to_dense(&self) -> Dense {
        let mut out = Dense::zeros((self.rows, self.cols));
        for (i, j, v) in self.entries() {
            out[[i, j]] = v;
        }
        out
    }

    pub fn transpose(&self) -> SparseMatrix {
        let entries = self.entries().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_entries(self.cols, self.rows, entries).expect("transpose preserves validity")
    }

    /// Exact structural symmetry: every stored `(i, j, v)` has a stored
    /// `(j, i, v)` with bitwise-equal value.
    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && self
                .entries()
                .all(|(i, j, v)| self.get(j, i).to_bits() == v.to_bits())
    }

    /// Scales every stored value by `s`.
    pub fn scaled(&self, s: f64) -> SparseMatrix {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    /// Sparse-dense product `self * d`.
    pub fn matmul_dense(&self, d: &Dense) -> Result<Dense> {
        if self.cols != d.nrows() {
            return Err(Error::shape(
                "spmm",
                format!(
                    "sparse is {}x{} but dense is {}x{}",
                    self.rows,
                    self.cols,
                    d.nrows(),
                    d.ncols()
                ),
            ));
        }
        let k = d.ncols();
        let mut out = Dense::zeros((self.rows, k));
        let dv = d.as_slice().expect("dense matrices are standard layout");
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            let mut row_out = out.row_mut(i);
            let ro = row_out.as_slice_mut().expect("row view is contiguous");
            for (&c, &v) in cols.iter().zip(vals) {
                let src = &dv[c * k..(c + 1) * k];
                for (o, s) in ro.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// Transposed sparse-dense product `self^T * d` without materializing
    /// the transpose. Used by backpropagation through [`Self::matmul_dense`].
    pub fn matmul_dense_transposed(&self, d: &Dense) -> Result<Dense> {
        if self.rows != d.nrows() {
            return Err(Error::shape(
                "spmm_transposed",
                format!(
                    "sparse^T is {}x{} but dense is {}x{}",
                    self.cols,
                    self.rows,
                    d.nrows(),
                    d.ncols()
                ),
            ));
        }
        let k = d.ncols();
        let mut out = Dense::zeros((self.cols, k));
        let ov = out.as_slice_mut().expect("dense matrices are standard layout");
        let dv = d.as_slice().expect("dense matrices are standard layout");
        for i in 0..self.rows {
            let (cols, vals) = self.row(i);
            let src = &dv[i * k..(i + 1) * k];
            for (&c, &v) in cols.iter().zip(vals) {
                let dst = &mut ov[c * k..(c + 1) * k];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }
}

/// Adds a unit self-loop to every node of a square adjacency matrix.
///
/// Nodes that already have a self-entry keep the larger of the stored value
/// and 1.
pub fn add_self_loops(a: &SparseMatrix) -> Result<SparseMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::Sparse(format!(
            "self loops need a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut entries: Vec<_> = a.entries().collect();
    entries.extend((0..a.rows()).map(|i| (i, i, 1.0)));
    SparseMatrix::from_entries_collapse_max(a.rows(), a.cols(), entries)
}

/// Symmetric degree normalization `D^{-1/2} A D^{-1/2}` where `D` is the
/// diagonal of row sums of `a`.
///
/// Every row must have a positive sum; apply [`add_self_loops`] first for
/// graphs with isolated nodes. Rejects negative weights since the square
/// root of the degree would be undefined territory.
pub fn sym_normalize(a: &SparseMatrix) -> Result<SparseMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::Sparse(format!(
            "normalization needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut degree = vec![0.0f64; n];
    for (i, _, v) in a.entries() {
        if v < 0.0 {
            return Err(Error::numeric(
                "sym_normalize",
                format!("negative weight {v} in row {i}"),
            ));
        }
        degree[i] += v;
    }
    let mut inv_sqrt = vec![0.0f64; n];
    for (i, &d) in degree.iter().enumerate() {
        if d <= 0.0 {
            return Err(Error::numeric(
                "sym_normalize",
                format!("node {i} has zero degree; add self loops before normalizing"),
            ));
        }
        inv_sqrt[i] = 1.0 / d.sqrt();
    }
    let entries = a
        .entries()
        .map(|(i, j, v)| (i, j, v * inv_sqrt[i] * inv_sqrt[j]))
        .collect();
    SparseMatrix::from_entries(n, n, entries)
}

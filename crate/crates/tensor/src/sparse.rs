//! One-dimensional sparse linear maps used for separable image resampling.

use std::sync::Arc;

/// Row-sparse matrix of shape `rows.len() × n_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    n_in: usize,
    rows: Vec<Vec<(usize, f64)>>,
    /// Row-major `n_out × n_in` copy when the map is dense enough for GEMM to win.
    dense: Option<Vec<f64>>,
}

impl SparseRows {
    pub fn new(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        for row in &rows {
            for &(j, _) in row {
                assert!(j < n_in, "column {j} out of range for {n_in} inputs");
            }
        }
        let dense = Self::dense_if_worthwhile(n_in, &rows);
        Self { n_in, rows, dense }
    }

    fn dense_if_worthwhile(n_in: usize, rows: &[Vec<(usize, f64)>]) -> Option<Vec<f64>> {
        let nnz: usize = rows.iter().map(Vec::len).sum();
        if n_in > 512 || rows.is_empty() || nnz < 6 * rows.len() {
            return None;
        }
        let mut d = vec![0.0; rows.len() * n_in];
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                d[i * n_in + j] += w;
            }
        }
        Some(d)
    }

    pub fn dense(&self) -> Option<&[f64]> {
        self.dense.as_deref()
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n_in];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                rows[j].push((i, w));
            }
        }
        Self::new(self.rows.len(), rows)
    }

    /// `y = M x` for a strided 1D view.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_in);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_in]; self.rows.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[i][j] += w;
            }
        }
        out
    }
}

/// A sparse map bundled with its adjoint so that gradients can swap them.
#[derive(Clone, Debug)]
pub struct LinearMap1d {
    fwd: Arc<SparseRows>,
    adj: Arc<SparseRows>,
}

impl LinearMap1d {
    pub fn new(m: SparseRows) -> Self {
        let adj = Arc::new(m.transpose());
        Self { fwd: Arc::new(m), adj }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(SparseRows::identity(n))
    }

    pub fn matrix(&self) -> &SparseRows {
        &self.fwd
    }

    pub fn adjoint(&self) -> Self {
        Self { fwd: self.adj.clone(), adj: self.fwd.clone() }
    }

    pub fn n_in(&self) -> usize {
        self.fwd.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.fwd.n_out()
    }
}

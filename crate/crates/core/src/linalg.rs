//! Small dense helpers shared by the integrators, filters and simulator.

use nalgebra::{DMatrix, DVector};

/// Row-per-node storage for a vector-valued path (one heap block per path).
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSeries {
    dim: usize,
    data: Vec<f64>,
}

impl NodeSeries {
    pub fn zeros(len: usize, dim: usize) -> Self {
        NodeSeries {
            dim,
            data: vec![0.0; len * dim],
        }
    }

    pub fn from_rows<I, R>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f64]>,
    {
        let mut data = Vec::new();
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), dim, "row length must equal series dimension");
            data.extend_from_slice(r);
        }
        NodeSeries { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vector(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.row(k))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Row-major storage.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// First `len` rows.
    pub fn prefix(&self, len: usize) -> NodeSeries {
        NodeSeries {
            dim: self.dim,
            data: self.data[..len * self.dim].to_vec(),
        }
    }
}

/// `y += alpha * a * x` on plain slices; `a` is column-major.
#[inline]
pub fn gemv_acc(y: &mut [f64], alpha: f64, a: &DMatrix<f64>, x: &[f64]) {
    let (rows, cols) = a.shape();
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(x.len(), cols);
    let s = a.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        let ax = alpha * xj;
        let col = &s[j * rows..(j + 1) * rows];
        for (yi, &aij) in y.iter_mut().zip(col) {
            *yi += aij * ax;
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// A factor `L` with `L Lᵀ = m` for a symmetric PSD matrix.
///
/// Cholesky when `m` is positive definite; otherwise an eigen square root
/// with negative round-off eigenvalues clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = symmetrize(m).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn is_diagonal(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)].abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

//! Dense-vector primitives shared by all losses: normalization, similarity
//! matrices, pairwise distances.
//!
//! Everything here is a pure function over 64-bit floats. The smoothed norm
//! `sqrt(x'x + eps) - sqrt(eps)` is used wherever a distance feeds a gradient:
//! it is exact at zero and differentiable everywhere, while the raw Euclidean
//! norm has no gradient at coincident points.

use crate::error::{Error, Result};

/// Smoothing constant inside the square root of every differentiated norm.
pub const NORM_SMOOTHING_EPS: f64 = 1e-12;

/// Dense row-major matrix of finite `f64` values. Rows are samples, columns
/// are embedding coordinates; the same type carries similarity matrices and
/// gradient blocks, which share the layout and the finiteness invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    /// Builds a batch from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "EmbeddingBatch::new",
                expected: format!("{} values ({rows}x{cols})", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "EmbeddingBatch::new".into(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch {
                context: "EmbeddingBatch::from_rows",
                expected: format!("all rows of width {d}"),
                got: "ragged rows".into(),
            });
        }
        Self::new(n, d, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// True if either dimension is zero.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self += scale * other`, elementwise. Shapes must match.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, scale: f64) {
        for v in &mut self.data {
            *v *= scale;
        }
    }
}

/// Symmetric pairwise-distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }
}

/// Euclidean dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smoothed Euclidean norm: `sqrt(|v|^2 + eps) - sqrt(eps)`.
///
/// Exact at the origin and smooth everywhere. The gradient with respect to
/// `v` is `v / sqrt(|v|^2 + eps)`; [`smoothed_norm_with_scale`] returns the
/// `1 / sqrt(|v|^2 + eps)` factor alongside the value for gradient reuse.
pub fn smoothed_norm(v: &[f64], eps: f64) -> f64 {
    let sq: f64 = v.iter().map(|x| x * x).sum();
    (sq + eps).sqrt() - eps.sqrt()
}

pub fn smoothed_norm_with_scale(v: &[f64], eps: f64) -> (f64, f64) {
    let sq: f64 = v.iter().map(|x| x * x).sum();
    let root = (sq + eps).sqrt();
    (root - eps.sqrt(), 1.0 / root)
}

/// Smoothed distance between two rows plus the gradient scale factor.
pub fn smoothed_distance_with_scale(a: &[f64], b: &[f64], eps: f64) -> (f64, f64) {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let root = (sq + eps).sqrt();
    (root - eps.sqrt(), 1.0 / root)
}

/// Row-wise L2 normalization. Rows whose raw norm is below `eps` pass
/// through unchanged; their indices are returned as the degenerate list.
pub fn l2_normalize(batch: &EmbeddingBatch, eps: f64) -> (EmbeddingBatch, Vec<usize>) {
    let mut out = batch.clone();
    let mut degenerate = Vec::new();
    for i in 0..batch.rows() {
        let norm = dot(batch.row(i), batch.row(i)).sqrt();
        if norm < eps {
            degenerate.push(i);
        } else {
            for v in out.row_mut(i) {
                *v /= norm;
            }
        }
    }
    (out, degenerate)
}

/// All pairwise smoothed Euclidean distances within a batch.
///
/// `entries[i][j] = sqrt(|x_i - x_j|^2 + eps) - sqrt(eps)`, so coincident
/// rows map to exactly zero and the matrix stays symmetric with a zero
/// diagonal by construction.
pub fn pairwise_euclidean(batch: &EmbeddingBatch, eps: f64) -> DistanceMatrix {
    let n = batch.rows();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (d, _) = smoothed_distance_with_scale(batch.row(i), batch.row(j), eps);
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    DistanceMatrix { size: n, entries }
}

/// Cross-batch dot-product similarities: `out[i][j] = a_i . b_j`.
pub fn similarity_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    if a.cols() != b.cols() || a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            context: "similarity_matrix",
            expected: format!("{}x{}", a.rows(), a.cols()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    let n = a.rows();
    let mut out = EmbeddingBatch::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, dot(a.row(i), b.row(j)));
        }
    }
    Ok(out)
}

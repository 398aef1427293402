//! Dense row-major linear algebra used throughout the crate.
//!
//! Everything here computes in `f64`. Selection helpers (`row_argmax`,
//! `row_topk`) break ties towards the lowest index so that every selection is
//! reproducible bit-for-bit.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Default epsilon below which a vector is considered degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix has no row content.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    ///
    /// Each entry is accumulated in ascending inner index, so results do not
    /// depend on blocking or FMA choices of a BLAS kernel. Selections taken
    /// from the product are then reproducible by a naive loop.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        for i in 0..self.rows {
            let dst = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                dst.iter_mut().zip(other.row(k)).for_each(|(d, b)| *d += a * b);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        out.view_mut().assign(&self.view().dot(&other.view().t()));
        Ok(out)
    }

    pub(crate) fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &self.data).expect("shape matches data")
    }

    pub(crate) fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut self.data)
            .expect("shape matches data")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖`, refusing vectors shorter than `eps`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue("vector".into()));
    }
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFiniteValue("vector norm overflow".into()));
    }
    if n < eps {
        return Err(Error::NearZeroNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalizes every row of `m` in place.
pub fn normalize_rows(m: &mut FeatureMatrix, eps: f64) -> Result<()> {
    let cols = m.cols();
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        if !n.is_finite() {
            return Err(Error::NonFiniteValue(format!("row {i}")));
        }
        if n < eps {
            return Err(Error::NearZeroNorm { norm: n });
        }
        row.iter_mut().for_each(|x| *x /= n);
        debug_assert_eq!(row.len(), cols);
    }
    Ok(())
}

/// Cosine similarity of row-normalized inputs: `out[i][j] = a_i · b_j`.
///
/// Entries are plain sequential dot products, so selections made on them agree
/// exactly with any other sequential evaluation.
pub fn cosine_sim_matrix(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FeatureMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "similarity of {}-dim and {}-dim rows",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = FeatureMatrix::zeros(a.rows(), b.rows());
    for (i, ra) in a.iter_rows().enumerate() {
        let dst = out.row_mut(i);
        for (j, rb) in b.iter_rows().enumerate() {
            dst[j] = dot(ra, rb);
        }
    }
    Ok(out)
}

/// Index of the first maximum of `row`.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn row_argmax(m: &FeatureMatrix) -> Result<Vec<usize>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::DimensionMismatch("argmax of an empty matrix".into()));
    }
    Ok(m.iter_rows().map(argmax).collect())
}

/// Indices of the `k` largest entries in descending value order.
///
/// Equal values keep ascending index order.
pub fn row_topk(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps the index order for ties.
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k.min(row.len()));
    idx
}

/// `softmax(row / tau)` with max subtraction.
pub fn softmax(row: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(softmax_unchecked(row, tau))
}

pub(crate) fn softmax_unchecked(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `log Σ exp(row / tau)` computed stably.
pub(crate) fn log_sum_exp(row: &[f64], tau: f64) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| ((v - max) / tau).exp()).sum();
    max / tau + s.ln()
}

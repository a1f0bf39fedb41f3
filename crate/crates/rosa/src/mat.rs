//! Dense matrices with an explicit storage layout, plus the handful of
//! deterministic linear-algebra primitives everything else is built on.
//!
//! Summation order is part of the contract: every reduction here runs over
//! ascending inner index, so results are reproducible bit-for-bit across
//! runs and independent of the storage layout flag.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    RowMajor,
    ColMajor,
}

/// Dense `rows x cols` matrix of f64 with an explicit layout flag.
///
/// Transposition is a relabel: dimensions swap, the layout flag flips, and
/// the data vector is reused bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    layout: Layout,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            layout: Layout::RowMajor,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_data(rows: usize, cols: usize, layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Mat::from_data", rows * cols, data.len()));
        }
        Ok(Mat {
            rows,
            cols,
            layout,
            data,
        })
    }

    /// Row-major construction from nested rows; for tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            layout: Layout::RowMajor,
            data,
        }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Mat::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        match self.layout {
            Layout::RowMajor => self.data[i * self.cols + j],
            Layout::ColMajor => self.data[j * self.rows + i],
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        match self.layout {
            Layout::RowMajor => self.data[i * self.cols + j] = v,
            Layout::ColMajor => self.data[j * self.rows + i] = v,
        }
    }

    /// Transpose by relabeling: same data vector, swapped dims, flipped layout.
    pub fn transpose(&self) -> Mat {
        Mat {
            rows: self.cols,
            cols: self.rows,
            layout: match self.layout {
                Layout::RowMajor => Layout::ColMajor,
                Layout::ColMajor => Layout::RowMajor,
            },
            data: self.data.clone(),
        }
    }

    /// Borrow row `i` as a slice. Only valid for row-major storage.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.layout, Layout::RowMajor, "row() requires row-major layout");
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert_eq!(self.layout, Layout::RowMajor, "row_mut() requires row-major layout");
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rewrites the matrix into row-major storage (element order fixed).
    pub fn to_row_major(&self) -> Mat {
        match self.layout {
            Layout::RowMajor => self.clone(),
            Layout::ColMajor => {
                let mut m = Mat::zeros(self.rows, self.cols);
                for i in 0..self.rows {
                    for j in 0..self.cols {
                        m.set(i, j, self.at(i, j));
                    }
                }
                m
            }
        }
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Max |a_ij - b_ij| between two same-shaped matrices.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                m = m.max((self.at(i, j) - other.at(i, j)).abs());
            }
        }
        m
    }

    /// Scales column `j` by `g[j]`: `self * diag(g)`.
    pub fn scale_cols(&self, g: &[f64]) -> Result<Mat> {
        if g.len() != self.cols {
            return Err(Error::dim("Mat::scale_cols", self.cols, g.len()));
        }
        let mut out = Mat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, &gj) in g.iter().enumerate() {
                out.set(i, j, self.at(i, j) * gj);
            }
        }
        Ok(out)
    }
}

/// `y = W x` with fixed ascending-`j` summation per output element.
///
/// The result is bit-identical regardless of `W`'s layout flag because the
/// accumulation order is defined over logical indices, not storage order.
pub fn gemv_dense(w: &Mat, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols {
        return Err(Error::dim("gemv_dense", w.cols, x.len()));
    }
    let mut y = vec![0.0; w.rows];
    for (i, yi) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, xj) in x.iter().enumerate() {
            acc += w.at(i, j) * xj;
        }
        *yi = acc;
    }
    Ok(y)
}

/// `C = A · B`, ascending-`k` accumulation.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::dim("matmul", a.cols, b.rows));
    }
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.at(i, k) * b.at(k, j);
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

/// `C = A · B^T`, i.e. `c_ij = sum_k a_ik b_jk`. This is the projection
/// pattern for row-activation batches against `D_out x D_in` weights.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", a.cols, b.cols));
    }
    let mut c = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.at(i, k) * b.at(j, k);
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

/// `C = A^T · B`, i.e. `c_ij = sum_k a_ki b_kj`.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::dim("matmul_tn", a.rows, b.rows));
    }
    let mut c = Mat::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.rows {
                acc += a.at(k, i) * b.at(k, j);
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

/// Max |Q Q^T - I| element; 0 for an exactly orthogonal matrix.
pub fn orthogonality_defect(q: &Mat) -> f64 {
    assert_eq!(q.rows, q.cols);
    let qqt = matmul_nt(q, q).expect("square");
    let mut defect = 0.0f64;
    for i in 0..q.rows {
        for j in 0..q.cols {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((qqt.at(i, j) - target).abs());
        }
    }
    defect
}

/// RMS normalization: `out_i = gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(Error::dim("rmsnorm", x.len(), gain.len()));
    }
    if x.is_empty() {
        return Err(Error::arg("rmsnorm", "empty input"));
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (ms + eps).sqrt();
    Ok(x.iter().zip(gain).map(|(v, g)| g * v * scale).collect())
}

/// Relative L2 error `||a - b|| / ||a||`; by convention 0 when both are zero.
pub fn relative_l2_error(reference: &[f64], candidate: &[f64]) -> f64 {
    assert_eq!(reference.len(), candidate.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, c) in reference.iter().zip(candidate) {
        num += (r - c) * (r - c);
        den += r * r;
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

//! Dense row-major 2-D and 4-D arrays.
//!
//! An [`ActivationStack`] stores `n × h × w × d` values with the channel
//! index fastest, so its buffer read as an `(n·h·w) × d` row-major matrix is
//! exactly the flattened instance set: row `(f·h + y)·w + x` holds the
//! `d`-vector of frame `f` at pixel `(y, x)`.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            1.0,
            MatRef::row_major(&self.data, self.cols),
            MatRef::row_major(&rhs.data, rhs.cols),
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::Dimension(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        gemm(
            self.cols,
            self.rows,
            rhs.cols,
            1.0,
            MatRef::transposed(&self.data, self.cols),
            MatRef::row_major(&rhs.data, rhs.cols),
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn trace(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(Error::Dimension(format!(
                "trace of non-square {}x{}",
                self.rows, self.cols
            )));
        }
        Ok((0..self.rows).map(|i| self.get(i, i)).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::Dimension("symmetrize non-square".into()));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        }))
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension(format!(
                "elementwise {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }
}

/// Strided read-only view handed to the gemm kernel.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major storage with `ld` columns.
    pub fn row_major(data: &'a [f64], ld: usize) -> Self {
        Self {
            data,
            row_stride: ld as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix with `ld` columns.
    pub fn transposed(data: &'a [f64], ld: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: ld as isize,
        }
    }
}

/// `c ← alpha·a·b + beta·c` where `a` is m×k, `b` is k×n and `c` is a
/// row-major m×n buffer.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let span = |r: MatRef<'_>, rows: usize, cols: usize| {
        (rows - 1) as isize * r.row_stride + (cols - 1) as isize * r.col_stride + 1
    };
    assert!(span(a, m, k) as usize <= a.data.len());
    assert!(span(b, k, n) as usize <= b.data.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed with at least m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Instances-by-features matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub matrix: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledMatrix {
    pub fn new(matrix: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != matrix.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                matrix.rows()
            )));
        }
        Ok(Self { matrix, labels })
    }

    /// Number of classes implied by the largest label.
    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows per class for classes `0..class_count()`.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// `n × h × w × d` activations, channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    n: usize,
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl ActivationStack {
    pub fn new(n: usize, h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || d == 0 {
            return Err(Error::Dimension(format!(
                "stack dims must be positive, got {n}x{h}x{w}x{d}"
            )));
        }
        if data.len() != n * h * w * d {
            return Err(Error::Dimension(format!(
                "stack {n}x{h}x{w}x{d} needs {} values, got {}",
                n * h * w * d,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("stack entry {i} is {}", data[i])));
        }
        Ok(Self { n, h, w, d, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize, d: usize) -> Self {
        Self {
            n,
            h,
            w,
            d,
            data: vec![0.0; n * h * w * d],
        }
    }

    pub fn from_fn(
        n: usize,
        h: usize,
        w: usize,
        d: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(n * h * w * d);
        for fi in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..d {
                        data.push(f(fi, y, x, c));
                    }
                }
            }
        }
        Self { n, h, w, d, data }
    }

    /// Builds a stack without the finiteness scan; used on hot paths whose
    /// inputs were already validated.
    pub(crate) fn from_raw(n: usize, h: usize, w: usize, d: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * h * w * d);
        Self { n, h, w, d, data }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    /// `(n, h, w, d)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.d)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.h + y) * self.w + x) * self.d + c
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(f, y, x, c)]
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let len = self.frame_len();
        &self.data[f * len..(f + 1) * len]
    }

    /// Copies frames `idx` into a new stack, in the given order.
    pub fn select_frames(&self, idx: &[usize]) -> ActivationStack {
        let mut data = Vec::with_capacity(idx.len() * self.frame_len());
        for &i in idx {
            data.extend_from_slice(self.frame(i));
        }
        ActivationStack::from_raw(idx.len(), self.h, self.w, self.d, data)
    }
}

/// Per-frame `h × w` criteria used to pick pooled locations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }
}

/// Reshapes `n × h × w × d` activations into the `(n·h·w) × d` instance
/// matrix, frame-major then row-major over pixels.
pub fn flatten_stack(stack: &ActivationStack) -> Matrix {
    Matrix {
        rows: stack.n * stack.h * stack.w,
        cols: stack.d,
        data: stack.data.clone(),
    }
}

/// Splits a per-instance score vector back into one `h × w` map per frame;
/// exact inverse of the row order used by [`flatten_stack`].
pub fn unflatten_scores(scores: &[f64], dims: (usize, usize, usize)) -> Result<Vec<ScoreMap>> {
    let (n, h, w) = dims;
    if scores.len() != n * h * w {
        return Err(Error::Dimension(format!(
            "{} scores cannot fill {n} maps of {h}x{w}",
            scores.len()
        )));
    }
    Ok(scores
        .chunks(h * w)
        .map(|c| ScoreMap {
            h,
            w,
            values: c.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flatten_identity_case() {
        let s = ActivationStack::new(1, 1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let m = flatten_stack(&s);
        assert_eq!(m.shape(), (1, 3));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn flatten_matches_index_enumeration() {
        // n=2, h=2, w=1, d=1: enumerate (frame, y, x) by hand.
        let s = ActivationStack::from_fn(2, 2, 1, 1, |f, y, x, _| (100 * f + 10 * y + x) as f64);
        let m = flatten_stack(&s);
        assert_eq!(m.shape(), (4, 1));
        let mut expected = Vec::new();
        for f in 0..2 {
            for y in 0..2 {
                expected.push((100 * f + 10 * y) as f64);
            }
        }
        assert_eq!(m.data(), expected.as_slice());
        let maps = unflatten_scores(m.data(), (2, 2, 1)).unwrap();
        for f in 0..2 {
            for y in 0..2 {
                assert_eq!(maps[f].get(y, 0), s.get(f, y, 0, 0));
            }
        }
    }

    #[test]
    fn single_score_map() {
        let maps = unflatten_scores(&[4.5], (1, 1, 1)).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].values, vec![4.5]);
    }

    #[test]
    fn unflatten_rejects_length_mismatch() {
        assert!(matches!(
            unflatten_scores(&[0.0; 7], (2, 2, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mnist_pipeline_shapes() {
        let s = ActivationStack::zeros(100, 24, 24, 20);
        let m = flatten_stack(&s);
        assert_eq!(m.shape(), (57600, 20));
        let maps = unflatten_scores(&vec![0.0; 57600], (100, 24, 24)).unwrap();
        assert_eq!(maps.len(), 100);
        assert!(maps.iter().all(|m| m.h == 24 && m.w == 24));
    }

    #[test]
    fn kernels() {
        assert_eq!(Matrix::identity(3).trace().unwrap(), 3.0);
        assert_eq!(Matrix::zeros(3, 4).frobenius_norm(), 0.0);
        assert!(Matrix::zeros(2, 3).trace().is_err());
        assert!(Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).is_err());
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let at = a.transpose();
        assert_eq!(at.shape(), (3, 2));
        assert_eq!(at.get(2, 1), 6.0);
        let g = a.matmul(&at).unwrap();
        assert_eq!(g.data(), &[14.0, 32.0, 32.0, 77.0]);
        assert_eq!(a.t_matmul(&a).unwrap(), at.matmul(&a).unwrap());
    }

    #[test]
    fn matmul_with_inverse_gives_identity() {
        // Well-conditioned 4x4: diagonally dominant, inverse by Gauss-Jordan.
        let a = Matrix::from_fn(4, 4, |i, j| {
            if i == j {
                5.0 + i as f64
            } else {
                ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6
            }
        });
        let inv = gauss_jordan_inverse(&a);
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let p = (col..n)
                .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
                .unwrap();
            aug.swap(col, p);
            let piv = aug[col][col];
            aug[col].iter_mut().for_each(|v| *v /= piv);
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    let pivot_row = aug[col].clone();
                    aug[r]
                        .iter_mut()
                        .zip(&pivot_row)
                        .for_each(|(v, p)| *v -= f * p);
                }
            }
        }
        Matrix::from_fn(n, n, |i, j| aug[i][n + j])
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(ActivationStack::new(1, 1, 1, 1, vec![f64::INFINITY]).is_err());
        assert!(ActivationStack::new(0, 1, 1, 1, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity_permutation(
            n in 1usize..=5, h in 1usize..=5, w in 1usize..=5, d in 1usize..=5, ch in 0usize..5
        ) {
            let ch = ch % d;
            // Tag every position with a unique code, then check each flattened
            // row lands back at the position it came from.
            let tag = |f: usize, y: usize, x: usize, c: usize| ((f * 10 + y) * 10 + x) as f64 * 10.0 + c as f64;
            let s = ActivationStack::from_fn(n, h, w, d, tag);
            let m = flatten_stack(&s);
            prop_assert_eq!(m.shape(), (n * h * w, d));
            let column = m.column(ch);
            let maps = unflatten_scores(&column, (n, h, w)).unwrap();
            for f in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(maps[f].get(y, x), tag(f, y, x, ch));
                    }
                }
            }
        }

        #[test]
        fn kernels_are_deterministic(seed in 0u64..1000) {
            let a = Matrix::from_fn(7, 5, |i, j| ((seed as usize + i * 31 + j * 17) % 13) as f64 / 7.0 - 0.9);
            let b = Matrix::from_fn(5, 6, |i, j| ((seed as usize * 3 + i * 11 + j * 5) % 19) as f64 / 9.0 - 1.1);
            let p1 = a.matmul(&b).unwrap();
            let p2 = a.matmul(&b).unwrap();
            prop_assert!(p1.data().iter().zip(p2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

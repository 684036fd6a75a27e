use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Masks are stored densely too. At the scales this crate targets
/// (a few thousand sites) an `n × g` mask costs `8·n·g` bytes, e.g. about
/// 40 MB for 5000 sites against 1000 genes.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Entrywise binary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Mul,
    Add,
    Sub,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A `1 × n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of entries different from zero.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn elementwise(&self, other: &Matrix, op: ElementwiseOp) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "elementwise",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Mul => |a, b| a * b,
            ElementwiseOp::Add => |a, b| a + b,
            ElementwiseOp::Sub => |a, b| a - b,
        };
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols.max(1)) {
            for (v, b) in r.iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 × cols` row.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.rows);
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(indices.iter().map(|&j| r[j]));
        }
        Matrix {
            rows: self.rows,
            cols: indices.len(),
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian bytes of the shape followed by every entry; used for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "\n  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "\n]")
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Entrywise product, sum or difference of equally shaped matrices.
pub fn elementwise(a: &Matrix, b: &Matrix, op: ElementwiseOp) -> Result<Matrix> {
    a.elementwise(b, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a2() -> Matrix {
        Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])
    }

    #[test]
    fn identity_product() {
        assert_eq!(matmul(&Matrix::identity(2), &a2()).unwrap(), a2());
    }

    #[test]
    fn zero_product() {
        assert_eq!(matmul(&Matrix::zeros(2, 2), &a2()).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn hand_product() {
        let b = Matrix::from_rows(&[[5.0], [6.0]]);
        assert_eq!(
            matmul(&a2(), &b).unwrap(),
            Matrix::from_rows(&[[17.0], [39.0]])
        );
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = matmul(&a2(), &Matrix::zeros(3, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 2)") && msg.contains("(3, 1)"), "{msg}");
    }

    #[test]
    fn elementwise_cases() {
        let a = a2();
        assert_eq!(elementwise(&a, &Matrix::ones(2, 2), ElementwiseOp::Mul).unwrap(), a);
        assert_eq!(
            elementwise(&a, &Matrix::zeros(2, 2), ElementwiseOp::Mul).unwrap(),
            Matrix::zeros(2, 2)
        );
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        let y = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(
            elementwise(&x, &y, ElementwiseOp::Mul).unwrap(),
            Matrix::from_rows(&[[3.0, 8.0]])
        );
        assert_eq!(
            elementwise(&x, &y, ElementwiseOp::Sub).unwrap(),
            Matrix::from_rows(&[[-2.0, -2.0]])
        );
        assert!(elementwise(&x, &a, ElementwiseOp::Add).is_err());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]]);
        let b = Matrix::from_rows(&[[2.0, 1.0], [0.0, -3.0]]);
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        let c = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in small_matrix(3, 4),
            b in small_matrix(4, 2),
            c in small_matrix(2, 5),
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }
    }
}

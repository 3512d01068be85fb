use std::fmt;

use serde::{Deserialize, Serialize};

use super::MathError;

/// Dense row-major tensor of `f64` values.
///
/// Only rank 0, 1 and 2 are exercised by the model, but the shape is kept
/// general so scalars, vectors and matrices share one type.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, MathError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MathError::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MathError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MathError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(MathError::BadTensor {
                    shape: vec![rows.len(), cols],
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, MathError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(MathError::BadTensor {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Selects rows by index, producing a `[idx.len(), cols]` matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Selects columns by index along the last axis.
    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let mut shape = self.shape.clone();
        if let Some(last) = shape.last_mut() {
            *last = idx.len();
        }
        Self { shape, data }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.get2(i, j)).collect()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{}, {}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

/// Row-major `a[m,k] · b[k,n]`, accumulating in a fixed i-k-j order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major `a[m,k] · b[n,k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// Row-major `a[k,m]ᵀ · b[k,n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut ab = [0.0; 4];
        matmul_into(&a, &b, 2, 3, 2, &mut ab);
        assert_eq!(ab, [1.0 - 2.0 + 1.5, 0.0 + 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);

        let bt = Tensor::matrix(3, 2, b.to_vec()).unwrap().transpose();
        let mut ab2 = [0.0; 4];
        matmul_bt_into(&a, bt.data(), 2, 3, 2, &mut ab2);
        assert_eq!(ab, ab2);

        let at = Tensor::matrix(2, 3, a.to_vec()).unwrap().transpose();
        let mut ab3 = [0.0; 4];
        matmul_at_into(at.data(), &b, 3, 2, 2, &mut ab3);
        assert_eq!(ab, ab3);
    }

    #[test]
    fn select_rows_and_cols() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.select_cols(&[2, 0]).data(), &[3.0, 1.0, 6.0, 4.0]);
        assert_eq!(t.select_rows(&[1]).data(), &[4.0, 5.0, 6.0]);
        let v = Tensor::vector(vec![7.0, 8.0, 9.0]);
        assert_eq!(v.select_cols(&[0, 2]).data(), &[7.0, 9.0]);
        assert_eq!(v.select_cols(&[0, 2]).shape(), &[2]);
    }
}

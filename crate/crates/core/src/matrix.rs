//! Small row-major f32 matrix used by the reference transformer and the feature stores.

use std::ops::Range;

use crate::archive::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Views a rank-2 tensor `[rows, cols]` as a matrix (copying).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [r, c] => Ok(Self::new(*r, *c, t.data().to_vec())),
            s => Err(Error::Input(format!("expected a rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data).expect("matrix shape is consistent")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · wᵀ` where `w` is stored `[out × in]` and `self` is `[n × in]`.
    pub fn matmul_t(&self, w: &Matrix) -> Matrix {
        assert_eq!(self.cols, w.cols, "inner dimension mismatch");
        let mut out = Vec::with_capacity(self.rows * w.rows);
        for x in self.rows_iter() {
            for wr in w.rows_iter() {
                out.push(dot(x, wr));
            }
        }
        Matrix::new(self.rows, w.rows, out)
    }

    pub fn row_block(&self, range: Range<usize>) -> Matrix {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Matrix::new(range.len(), self.cols, data)
    }

    pub fn col_block(&self, range: Range<usize>) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * range.len());
        for r in self.rows_iter() {
            data.extend_from_slice(&r[range.clone()]);
        }
        Matrix::new(self.rows, range.len(), data)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix>) -> Matrix {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        for p in parts {
            match cols {
                None => cols = Some(p.cols),
                Some(c) => assert_eq!(c, p.cols, "vstack width mismatch"),
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Matrix::new(rows, cols.unwrap_or(0), data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_t_against_hand_values() {
        let x = Matrix::new(1, 2, vec![1.0, 2.0]);
        let w = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(x.matmul_t(&w).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn blocks() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.row_block(1..2).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(m.col_block(1..3).data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(Matrix::vstack([&m, &m]).rows(), 4);
    }
}

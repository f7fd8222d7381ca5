use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
///
/// Construction from external data rejects non-finite values; arithmetic
/// helpers assume finite operands and do not re-validate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Builds a tensor from a row-major value buffer, validating length and
    /// finiteness.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::argument(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {} at flat index {i}",
                values[i]
            )));
        }
        Ok(Tensor2D { rows, cols, values })
    }

    /// Builds a tensor from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::argument("tensor needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("ragged rows in tensor construction"));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_values(rows.len(), cols, values)
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    /// `self · x` where `x` has `cols` entries; returns `rows` entries.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
        out
    }

    /// `selfᵀ · y` where `y` has `rows` entries; returns `cols` entries.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in y.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yi;
            }
        }
        out
    }

    /// `self += scale · u vᵀ` with `u.len() == rows`, `v.len() == cols`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let f = scale * ur;
            for (w, vi) in self.row_mut(r).iter_mut().zip(v) {
                *w += f * vi;
            }
        }
    }

    /// `self += scale · other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor2D, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// Rows in reverse order.
    pub fn reversed_rows(&self) -> Tensor2D {
        let mut values = Vec::with_capacity(self.values.len());
        for r in (0..self.rows).rev() {
            values.extend_from_slice(self.row(r));
        }
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }

    /// Copy of the given row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2D {
        debug_assert!(start <= end && end <= self.rows);
        Tensor2D {
            rows: end - start,
            cols: self.cols,
            values: self.values[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of the given column range `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor2D {
        debug_assert!(start <= end && end <= self.cols);
        let mut values = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            values.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor2D {
            rows: self.rows,
            cols: end - start,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_values_checks_length_and_finiteness() {
        assert!(Tensor2D::from_values(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor2D::from_values(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor2D::from_values(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor2D::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn matvec_and_transpose() {
        let t = Tensor2D::from_values(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(t.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn outer_accumulation() {
        let mut t = Tensor2D::zeros(2, 2);
        t.add_outer(&[1.0, 2.0], &[3.0, 4.0], 1.0);
        assert_eq!(t.values(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn row_reversal_and_slices() {
        let t = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let r = t.reversed_rows();
        assert_eq!(r.row(0), &[5.0, 6.0]);
        assert_eq!(r.row(2), &[1.0, 2.0]);
        let s = t.slice_rows(1, 3);
        assert_eq!(s.rows(), 2);
        assert_eq!(s.row(0), &[3.0, 4.0]);
        let c = t.slice_cols(1, 2);
        assert_eq!(c.shape(), (3, 1));
        assert_eq!(c.values(), &[2.0, 4.0, 6.0]);
    }
}

//! Dense row-major `f64` matrices.
//!
//! Every numeric carrier in the crate (states, actions, disturbances, their
//! latent codes, network weights) is a [`Tensor`]. Vectors are 1×n rows.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}) ", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, ...]", &self.data[..8])
        }
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut t = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            t.data[i * n + i] = d;
        }
        t
    }

    /// A 1×n row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row(vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("Tensor::from_rows row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column `c` copied into a vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Adds a 1×cols row to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape("add_row", format!("1x{}", self.cols), shape_str(row)));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, b) in out.row_slice_mut(r).iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} · {}x_", self.rows, self.cols, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(product(self, false, other, false))
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{} rows", self.rows),
                format!("{} rows", other.rows),
            ));
        }
        Ok(product(self, true, other, false))
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{} cols", self.cols),
                format!("{} cols", other.cols),
            ));
        }
        Ok(product(self, false, other, true))
    }

    /// Column sums as a 1×cols row.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row_slice(r)) {
                *o += v;
            }
        }
        Self::row(out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} within {}", start + len, self.rows),
                self.rows,
            ));
        }
        Ok(Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} within {}", start + len, self.cols),
                self.cols,
            ));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row_slice(r)[start..start + len]);
        }
        Ok(Self {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("concat_rows", format!("{cols} cols"), shape_str(p)));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape("concat_cols", format!("{rows} rows"), shape_str(p)));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row_slice(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    fn expect_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, shape_str(self), shape_str(other)));
        }
        Ok(())
    }
}

pub(crate) fn shape_str(t: &Tensor) -> String {
    format!("{}x{}", t.rows, t.cols)
}

/// `op(a) · op(b)`, where `op` transposes when the flag is set. Mostly-zero
/// left operands (diagonal weightings) take a zero-skipping loop; everything
/// else goes through a blocked GEMM kernel.
fn product(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (n, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let m = if tb { b.rows } else { b.cols };
    let mut out = vec![0.0; n * m];
    if n * m * k == 0 {
        return Tensor { rows: n, cols: m, data: out };
    }
    let zeros = a.data.iter().filter(|v| **v == 0.0).count();
    if !tb && 2 * zeros > a.data.len() {
        for r in 0..a.rows {
            for (c, &v) in a.row_slice(r).iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let (i, kk) = if ta { (c, r) } else { (r, c) };
                for (o, &bv) in out[i * m..(i + 1) * m].iter_mut().zip(b.row_slice(kk)) {
                    *o += v * bv;
                }
            }
        }
    } else {
        let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        // SAFETY: the strides describe `op(a)` as n×k and `op(b)` as k×m
        // within their buffers, and `out` holds exactly n×m values.
        unsafe {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
    }
    Tensor { rows: n, cols: m, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let b = m(3, 2, &[2.0, 1.0, 0.0, -1.0, 1.0, 3.0]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.as_slice(), &[5.0, 8.0, 2.0, 10.5]);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(2, 1, &[5.0, 6.0]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice_cols(2, 1).unwrap(), b);
        let r = Tensor::concat_rows(&[&a, &a]).unwrap();
        assert_eq!(r.slice_rows(2, 2).unwrap(), a);
        assert!(Tensor::concat_rows(&[&a, &b]).is_err());
    }

    #[test]
    fn add_row_broadcasts() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = a.add_row(&Tensor::row(vec![10.0, 20.0])).unwrap();
        assert_eq!(out.as_slice(), &[11.0, 22.0, 13.0, 24.0]);
    }
}

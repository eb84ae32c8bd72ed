//! Dense row-major `f64` tensors and the raw kernels behind every tape primitive.
//!
//! Kernels are pure functions over [`Tensor`] values. The tape records which kernel
//! produced a value; the kernels themselves know nothing about differentiation.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AdError;
use crate::graph::SparseMatrix;

/// Dense real array in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.values)
    }
}

/// How the right operand of an elementwise op is expanded to the left operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// `[n, 1]` against `[n, m]`.
    Column,
    /// `[1, m]` against `[n, m]`.
    Row,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, AdError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AdError::BadLength { shape, len: values.len() });
        }
        Ok(Self { shape, values })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), values: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![value; len] }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == m), "ragged rows");
        Self { shape: vec![n, m], values: rows.concat() }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self { shape: vec![1, values.len()], values }
    }

    /// Uniform on `±sqrt(6 / (rows + cols))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor { shape: vec![rows, cols], values }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor (1 for lower ranks).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a rank-2 tensor (element count for lower ranks).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.values.len(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let m = self.cols();
        self.values[r * m + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let m = self.cols();
        &self.values[r * m..(r + 1) * m]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64, AdError> {
        if self.values.len() != 1 {
            return Err(AdError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast, AdError> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.iter().product::<usize>() == 1 && b.len() <= 2 {
            return Ok(Broadcast::Scalar);
        }
        if a.len() == 2 && b.len() == 2 {
            if b[0] == a[0] && b[1] == 1 {
                return Ok(Broadcast::Column);
            }
            if b[0] == 1 && b[1] == a[1] {
                return Ok(Broadcast::Row);
            }
        }
        Err(AdError::shape(op, a, b))
    }

    fn zip_broadcast(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AdError> {
        let kind = Self::broadcast_kind(op, &a.shape, &b.shape)?;
        let values = match kind {
            Broadcast::Same => a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = b.values[0];
                a.values.iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::Column => {
                let m = a.cols();
                a.values.iter().enumerate().map(|(i, &x)| f(x, b.values[i / m])).collect()
            }
            Broadcast::Row => {
                let m = a.cols();
                a.values.iter().enumerate().map(|(i, &x)| f(x, b.values[i % m])).collect()
            }
        };
        Ok(Tensor { shape: a.shape.clone(), values })
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor, AdError> {
        Self::zip_broadcast("add", self, b, |x, y| x + y)
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor, AdError> {
        Self::zip_broadcast("sub", self, b, |x, y| x - y)
    }

    pub fn mul(&self, b: &Tensor) -> Result<Tensor, AdError> {
        Self::zip_broadcast("mul", self, b, |x, y| x * y)
    }

    pub fn div(&self, b: &Tensor) -> Result<Tensor, AdError> {
        if b.values.iter().any(|&v| v == 0.0) {
            return Err(AdError::DivisionByZero { op: "div" });
        }
        Self::zip_broadcast("div", self, b, |x, y| x / y)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize), AdError> {
        if self.shape.len() != 2 {
            return Err(AdError::NotMatrix { op, shape: self.shape.clone() });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, b: &Tensor) -> Result<Tensor, AdError> {
        let (n, k) = self.require_matrix("matmul")?;
        let (k2, m) = b.require_matrix("matmul")?;
        if k != k2 {
            return Err(AdError::shape("matmul", &self.shape, &b.shape));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.values[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &b.values[p * m..(p + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], values: out })
    }

    pub fn transpose(&self) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.values[i * m + j];
            }
        }
        Ok(Tensor { shape: vec![m, n], values: out })
    }

    pub fn spmm(mat: &SparseMatrix, x: &Tensor) -> Result<Tensor, AdError> {
        let (n, m) = x.require_matrix("spmm")?;
        if mat.n_cols() != n {
            return Err(AdError::shape("spmm", &[mat.n_rows(), mat.n_cols()], &x.shape));
        }
        let mut out = vec![0.0; mat.n_rows() * m];
        for r in 0..mat.n_rows() {
            let out_row = &mut out[r * m..(r + 1) * m];
            for (c, w) in mat.row_entries(r) {
                let x_row = &x.values[c * m..(c + 1) * m];
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o += w * xv;
                }
            }
        }
        Ok(Tensor { shape: vec![mat.n_rows(), m], values: out })
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor, AdError> {
        if let Some(&v) = self.values.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(AdError::Domain { op: "log", value: v });
        }
        Ok(self.map(f64::ln))
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn sqrt(&self) -> Result<Tensor, AdError> {
        if let Some(&v) = self.values.iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(AdError::Domain { op: "sqrt", value: v });
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn softmax_rows(&self) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("softmax_rows")?;
        let mut out = self.values.clone();
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Tensor { shape: vec![n, m], values: out })
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("log_softmax_rows")?;
        let mut out = self.values.clone();
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Tensor { shape: vec![n, m], values: out })
    }

    pub fn l2_normalize_rows(&self) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("l2_normalize_rows")?;
        let mut out = self.values.clone();
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AdError::ZeroNorm { row: r });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(Tensor { shape: vec![n, m], values: out })
    }

    pub fn sum_all(&self) -> Tensor {
        Tensor::scalar(self.values.iter().sum())
    }

    /// Sums each row, giving an `[n, 1]` column.
    pub fn sum_rows(&self) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("sum_rows")?;
        let values = (0..n).map(|r| self.values[r * m..(r + 1) * m].iter().sum()).collect();
        Ok(Tensor { shape: vec![n, 1], values })
    }

    /// Sums each column, giving a `[1, m]` row.
    pub fn sum_cols(&self) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("sum_cols")?;
        let mut values = vec![0.0; m];
        for r in 0..n {
            for (acc, v) in values.iter_mut().zip(&self.values[r * m..(r + 1) * m]) {
                *acc += v;
            }
        }
        Ok(Tensor { shape: vec![1, m], values })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, AdError> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(AdError::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor { shape: shape.to_vec(), values: self.values.clone() })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, AdError> {
        let first = parts.first().ok_or(AdError::Invalid("concat of zero tensors".into()))?;
        let (n, _) = first.require_matrix("concat_cols")?;
        let mut width = 0;
        for p in parts {
            let (pn, pm) = p.require_matrix("concat_cols")?;
            if pn != n {
                return Err(AdError::shape("concat_cols", &first.shape, &p.shape));
            }
            width += pm;
        }
        let mut values = Vec::with_capacity(n * width);
        for r in 0..n {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor { shape: vec![n, width], values })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("slice_cols")?;
        if start > end || end > m {
            return Err(AdError::Invalid(format!("column slice {start}..{end} of width {m}")));
        }
        let mut values = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            values.extend_from_slice(&self.values[r * m + start..r * m + end]);
        }
        Ok(Tensor { shape: vec![n, end - start], values })
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("gather_rows")?;
        let mut values = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(AdError::Invalid(format!("row {i} out of range for {n} rows")));
            }
            values.extend_from_slice(&self.values[i * m..(i + 1) * m]);
        }
        Ok(Tensor { shape: vec![idx.len(), m], values })
    }

    /// Adds row `k` of `self` into row `idx[k]` of an `[n_rows, m]` zero matrix.
    pub fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Result<Tensor, AdError> {
        let (n, m) = self.require_matrix("scatter_rows")?;
        if n != idx.len() {
            return Err(AdError::Invalid(format!("scatter of {n} rows with {} indices", idx.len())));
        }
        let mut values = vec![0.0; n_rows * m];
        for (k, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(AdError::Invalid(format!("row {i} out of range for {n_rows} rows")));
            }
            for (o, v) in values[i * m..(i + 1) * m].iter_mut().zip(&self.values[k * m..(k + 1) * m]) {
                *o += v;
            }
        }
        Ok(Tensor { shape: vec![n_rows, m], values })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_rows(&[vec![-1.0, 2.0]]);
        assert_eq!(t.relu().values(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = Tensor::zeros(&[1, 3]).softmax_rows().unwrap();
        for v in s.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let t = Tensor::from_rows(&[vec![3.0, 4.0]]).l2_normalize_rows().unwrap();
        assert!((t.values()[0] - 0.6).abs() < 1e-15);
        assert!((t.values()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_row_is_rejected() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(t.l2_normalize_rows(), Err(AdError::ZeroNorm { row: 1 })));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn division_by_exact_zero_is_an_error() {
        let a = Tensor::ones(&[1, 2]);
        let b = Tensor::row_vector(vec![1.0, 0.0]);
        assert!(matches!(a.div(&b), Err(AdError::DivisionByZero { .. })));
    }

    #[test]
    fn broadcasting_rules() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let col = Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap();
        let row = Tensor::row_vector(vec![1.0, -1.0]);
        assert_eq!(a.add(&col).unwrap().values(), &[11.0, 12.0, 23.0, 24.0]);
        assert_eq!(a.mul(&row).unwrap().values(), &[1.0, -2.0, 3.0, -4.0]);
        assert_eq!(a.sub(&Tensor::scalar(1.0)).unwrap().values(), &[0.0, 1.0, 2.0, 3.0]);
        assert!(col.add(&a).is_err());
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let g = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.values(), &[3.0, 1.0, 3.0]);
        let s = g.scatter_rows(&[2, 0, 2], 3).unwrap();
        assert_eq!(s.values(), &[1.0, 0.0, 6.0]);
    }
}

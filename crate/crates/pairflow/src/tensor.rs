//! Dense row-major f64 tensors with a fixed, sequential reduction order.
//!
//! Every reduction runs left-to-right over the flat buffer so results are
//! bit-reproducible across runs and platforms. Public operations check that
//! their output is finite and report an error otherwise.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("{:?}", shape)));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("{:?}", shape)));
        }
        let n = shape.iter().product();
        Ok(Tensor {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                op, self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn finished(self, op: &'static str) -> Result<Tensor> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finished("add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finished("sub")
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul_elem")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finished("mul_elem")
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * s).collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finished("scale")
    }

    /// self + s * other, in one pass.
    pub fn axpy(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "axpy")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + s * b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finished("axpy")
    }

    /// Left-to-right sum over the flat buffer.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Squared L2 norm, fixed order.
    pub fn norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        let mut m = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            m = m.max((a - b).abs());
        }
        Ok(m)
    }
}

/// Row-major matrix view helpers. Matrices are `Tensor`s of rank 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// y = M x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            y[r] = acc;
        }
        y
    }

    /// y = M^T x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension mismatch");
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let xr = x[r];
            for (yc, w) in y.iter_mut().zip(row) {
                *yc += xr * w;
            }
        }
        y
    }

    /// self += s * u v^T
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let su = s * u[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, vc) in row.iter_mut().zip(v) {
                *w += su * vc;
            }
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn new_rejects_zero_dim() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::zeros(vec![2, 0]).is_err());
    }

    #[test]
    fn new_rejects_nan() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn add_sub_roundtrip() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]).unwrap();
        let c = a.add(&b).unwrap().sub(&b).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matvec_known() {
        let m = Matrix {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn sum_fixed_order_matches_sequential() {
        let t = Tensor::from_vec(vec![1e16, 1.0, -1e16, 1.0]).unwrap();
        // Left-to-right: ((1e16 + 1) - 1e16) + 1 == 1.0 in f64
        assert_eq!(t.sum(), 1.0);
    }

    proptest! {
        #[test]
        fn elementwise_commutes_with_reshape(v in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let a = Tensor::new(vec![2, 3], v.clone()).unwrap();
            let b = Tensor::new(vec![2, 3], v.iter().map(|x| x * 0.5).collect()).unwrap();
            let flat = a.reshape(vec![6]).unwrap()
                .add(&b.reshape(vec![6]).unwrap()).unwrap();
            let shaped = a.add(&b).unwrap().reshape(vec![6]).unwrap();
            prop_assert_eq!(flat.data(), shaped.data());
        }

        #[test]
        fn sum_is_left_to_right(v in proptest::collection::vec(-1e6f64..1e6, 1..32)) {
            let t = Tensor::from_vec(v.clone()).unwrap();
            let mut acc = 0.0;
            for x in &v { acc += x; }
            prop_assert_eq!(t.sum().to_bits(), acc.to_bits());
        }
    }
}

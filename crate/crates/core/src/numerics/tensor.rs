use serde::{Deserialize, Serialize};

use super::kernels;
use crate::error::{ensure, Result};

/// Dense row-major array of `f64`.
///
/// `Tensor` is a plain value. Gradient bookkeeping lives on the [`Tape`](super::Tape),
/// which owns one gradient buffer per recorded node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0) || data.is_empty(),
            Dimension,
            "shape {shape:?} has a zero extent"
        );
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Dimension,
            "shape {shape:?} holds {n} values but {} were given",
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), Dimension, "no rows");
        let cols = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Dimension,
            "ragged rows"
        );
        Self::new(vec![rows.len(), cols], rows.concat())
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

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            return 0;
        }
        self.data.len() / self.cols()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            Dimension,
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        ensure!(
            k == k2,
            Dimension,
            "matmul inner dimensions {k} and {k2} differ"
        );
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            0.0,
        );
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix()?;
        ensure!(
            self.is_finite(),
            Numeric,
            "softmax input contains non-finite values"
        );
        let mut out = self.data.clone();
        kernels::softmax_rows_inplace(&mut out, m, n);
        Tensor::new(vec![m, n], out)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        ensure!(d >= 1, Dimension, "layer norm needs a non-empty last axis");
        ensure!(
            gain.len() == d && bias.len() == d,
            Dimension,
            "gain/bias length must be {d}"
        );
        let mut out = vec![0.0; self.data.len()];
        kernels::layer_norm_forward(&self.data, gain.data(), bias.data(), eps, d, &mut out, None);
        ensure!(
            out.iter().all(|v| v.is_finite()),
            Numeric,
            "layer norm produced non-finite values"
        );
        Tensor::new(self.shape.clone(), out)
    }

    pub(crate) fn as_matrix(&self) -> Result<(usize, usize)> {
        ensure!(
            self.shape.len() == 2,
            Dimension,
            "expected a matrix, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1]))
    }
}

/// FNV-1a over the raw bit patterns; used for freeze-contract checks.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for &d in &t.shape {
            h = fnv(h, &(d as u64).to_le_bytes());
        }
        for v in &t.data {
            h = fnv(h, &v.to_bits().to_le_bytes());
        }
    }
    h
}

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let x = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, 7.0, 0.25]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn small_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::from_rows(&[vec![0.0; 4]])
            .unwrap()
            .softmax_rows()
            .unwrap();
        for v in s.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // oracle: exp(ln a) / (a + b) with a = 1, b = 3
        let s = Tensor::from_rows(&[vec![1f64.ln(), 3f64.ln()]])
            .unwrap()
            .softmax_rows()
            .unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);

        let big = Tensor::from_rows(&[vec![1000.0, 0.0]])
            .unwrap()
            .softmax_rows()
            .unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15);
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(t.softmax_rows(), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let c = Tensor::full(&[2, 3], 4.2);
        let out = c.layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));

        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let out = x
            .layer_norm(&Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12)
            .unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-10);
        assert!((out.data()[1] - 1.0).abs() < 1e-10);

        let bias = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let out = x.layer_norm(&Tensor::zeros(&[2]), &bias, 1e-5).unwrap();
        assert_eq!(out.data(), bias.data());
    }

    #[test]
    fn checksum_detects_single_bit() {
        let a = Tensor::full(&[4], 1.0);
        let mut b = a.clone();
        b.data_mut()[2] = f64::from_bits(1.0f64.to_bits() ^ 1);
        assert_ne!(checksum([&a]), checksum([&b]));
        assert_eq!(checksum([&a]), checksum([&a.clone()]));
    }
}

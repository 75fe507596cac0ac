//! Dense row-major tensors.
//!
//! Storage is a flat `Vec<E>` plus a dims list. There are no strided views:
//! every reshaping operation copies. `E` is `f32` for training and `f64` for
//! gradient checks.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar storage type for tensors.
pub trait Element: Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<E = f32> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Debug> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: &[usize], data: Vec<E>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-length axis in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, E::zero())
    }

    pub fn full(dims: &[usize], value: E) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = E::one();
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the last axis.
    #[inline]
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, idx: &[usize]) -> E {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(&self.dims) {
            debug_assert!(i < d);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    /// `[m, k] x [k, p] -> [m, p]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, p) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.dims, other.dims),
            ));
        }
        let mut out = vec![E::zero(); m * p];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, p);
        Self::new(&[m, p], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![E::zero(); m * n];
        kernels::transpose(&self.data, &mut out, m, n);
        Self::new(&[n, m], out)
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", self.dims))),
        }
    }
}

/// Plain-slice kernels shared by eager tensors and the autodiff graph.
///
/// All reductions run left to right so results are reproducible bit for bit.
pub(crate) mod kernels {
    use super::Element;

    /// `out += a[m,k] * b[k,p]`
    pub fn matmul<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &av) in a_row.iter().enumerate() {
                if av == E::zero() {
                    continue;
                }
                let b_row = &b[kk * p..(kk + 1) * p];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn transpose<E: Element>(a: &[E], out: &mut [E], m: usize, n: usize) {
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
    }

    pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
        let mut s = E::zero();
        for (&x, &y) in a.iter().zip(b) {
            s += x * y;
        }
        s
    }

    /// In-place numerically stable softmax of one row. Subnormal
    /// probabilities are flushed to zero; they are far below any tolerance
    /// here and make downstream arithmetic very slow.
    pub fn softmax_row<E: Element>(row: &mut [E]) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut sum = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            if *v < E::min_positive_value() {
                *v = E::zero();
            }
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f64>::from_f64(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn small_matmul() {
        let a = Tensor::<f32>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2, 1], &[1., 1.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn mismatched_inner_dims() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}

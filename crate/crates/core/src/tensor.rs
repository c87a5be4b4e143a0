//! Dense row-major tensors with an optional gradient buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;

/// A dense array of `T` in row-major order.
///
/// `grad`, once allocated, always has the same length as `data`. Tensors with
/// `trainable == false` never receive gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    trainable: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(alloc::format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            trainable: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            grad: None,
            trainable: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Entries drawn i.i.d. from `normal(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f64, std).expect("standard deviation must be finite");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(normal.sample(rng))).collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            trainable: false,
        }
    }

    pub fn with_trainable(mut self, trainable: bool) -> Self {
        self.set_trainable(trainable);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of the 2-D view: `[n]` is one row, `[r, c]` is itself.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(alloc::format!(
                "expected a rank-1 or rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Freezing drops any gradient buffer so a frozen tensor carries none.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.grad = None;
        }
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    ///
    /// Returns `Ok(false)` without touching anything when the tensor is frozen.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<bool> {
        if !self.trainable {
            return Ok(false);
        }
        if g.len() != self.data.len() {
            return Err(Error::dims("accumulate_grad", &self.shape, &[g.len()]));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (acc, &x) in buf.iter_mut().zip(g) {
            *acc += x;
        }
        Ok(true)
    }

    /// Zeroes the gradient buffer in place; keeps the allocation.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    /// Precision conversion; the gradient buffer is not carried over.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            grad: None,
            trainable: self.trainable,
        }
    }

    /// Obvious row-major product without gradient tracking.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::dims("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        crate::tape::kernels::gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }
}

impl Tensor<f32> {
    /// Little-endian IEEE-754 bytes of `data`.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }
}

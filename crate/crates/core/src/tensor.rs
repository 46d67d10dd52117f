//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is immutable once built apart from its gradient slot; data is
//! shared behind an `Arc` so graph leaves can alias parameter storage without
//! copying.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting element-count mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Tensor::new (index {i}: {})",
                data[i]
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![0.0; n]))
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    pub fn vector(data: &[f64]) -> Result<Self> {
        Self::new(&[data.len()], data.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(&[rows, cols], data.to_vec())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), Arc::new(data))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), Arc::new(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy-on-write access; only used by optimizers and perturbation probes.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Element at a 2-D index.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::clone(&self.data)))
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::shape(
                "set_grad",
                format!("grad of {} values for shape {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! A [`Tensor`] is a value container: parameters live in a [`ParamSet`] and
//! are bound onto a fresh [`Tape`] for every forward pass. Values are held in
//! an `Arc` so binding a large frozen weight matrix onto a tape is a pointer
//! copy.

mod kernels;
mod params;
mod tape;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DopError, Result};

pub use params::ParamSet;
pub use tape::{AttentionMask, Tape, Var, LAYER_NORM_EPS};
pub(crate) use kernels::dot;


#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(DopError::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            ));
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            grad: None,
            requires_grad: false,
        })
    }

    pub(crate) fn from_shared(shape: Vec<usize>, values: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_shared(shape, Arc::new(vec![0.0; n]))
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_shared(shape, Arc::new(vec![value; n]))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_shared(vec![1], Arc::new(vec![value]))
    }

    pub fn identity(n: usize) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Self::from_shared(vec![n, n], Arc::new(v))
    }

    /// Builds a 2-D tensor from equal-length rows. An empty slice yields a
    /// `0 × 0` tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DopError::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_shared(shape, Arc::new(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn shared_values(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    /// Mutable access; copies the buffer first if a tape still shares it.
    pub fn values_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            self.grad = Some(vec![0.0; self.numel()]);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(DopError::shape(
                "accumulate_grad",
                format!("gradient has {} entries, tensor has {}", g.len(), self.numel()),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Copies rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.cols();
        if start + len > self.rows() {
            return Err(DopError::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, self.shape),
            ));
        }
        Tensor::new(vec![len, c], self.values[start * c..(start + len) * c].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

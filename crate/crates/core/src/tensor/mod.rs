//! Dense row-major `f64` tensors, the tape-based autodiff engine, the AdamW
//! optimizer and the binary parameter checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{dim_err, Error, Result};
use crate::rng::Stream;

/// A dense n-dimensional array of 64-bit floats.
///
/// `product(shape) == data.len()` always holds, and the gradient buffer,
/// when present, has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite value {} at index {i}", data[i])));
    }
    Ok(())
}

impl Tensor {
    /// Build a tensor, rejecting extent mismatches, zero extents and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        if numel_of(&shape) != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(&shape),
                data.len()
            ));
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel_of(shape)], requires_grad: false, grad: None }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel_of(shape)], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut Stream) -> Self {
        let data = (0..numel_of(shape)).map(|_| std * rng.normal()).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers and initializers. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
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

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer, creating it if needed.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return dim_err(format!("gradient of length {} for tensor of {} values", g.len(), self.data.len()));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone(), requires_grad: false, grad: None })
    }

    /// Plain (non-recorded) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self)?;
        let (k2, n) = as_matrix(other)?;
        if k != k2 {
            return dim_err(format!("matmul inner extents {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, &self.data, false, &other.data, false, 0.0, &mut out);
        Tensor::new(vec![m, n], out)
    }

    /// Plain transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix(self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub(crate) fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => dim_err(format!("expected a matrix, got shape {s:?}")),
    }
}

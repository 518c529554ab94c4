//! Dense row-major tensors with an optional gradient slot.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a tensor. Training runs in `f32`; oracles and gradient
/// checks run the same kernels in `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// N-dimensional array. Axis 0 is the batch axis wherever a batch exists.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient slot, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} for tensor of length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Contiguous block of sample `b` along axis 0.
    pub fn sample(&self, b: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[b * stride..(b + 1) * stride]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "stack of {:?} and {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(&shape, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerKind {
    Conv2d,
    Linear,
}

/// Trainable weights and bias of one convolution or fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub kind: LayerKind,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(kind: LayerKind, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let expected_rank = match kind {
            LayerKind::Conv2d => 4,
            LayerKind::Linear => 2,
        };
        if weights.ndim() != expected_rank {
            return Err(Error::ShapeMismatch(format!(
                "{kind:?} weights must have rank {expected_rank}, got {:?}",
                weights.shape()
            )));
        }
        if bias.ndim() != 1 || bias.dim(0) != weights.dim(0) {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} does not match {} outputs",
                bias.shape(),
                weights.dim(0)
            )));
        }
        Ok(Self { weights, bias, kind })
    }

    /// Uniform in `±sqrt(1 / fan_in)` for weights and bias.
    pub fn init_conv(out_c: usize, in_c: usize, k: usize, rng: &mut crate::Rng) -> Self {
        let bound = (1.0 / (in_c * k * k) as f64).sqrt();
        let weights = Tensor::from_fn(&[out_c, in_c, k, k], |_| T::of_f64((2.0 * rng.uniform() - 1.0) * bound));
        let bias = Tensor::from_fn(&[out_c], |_| T::of_f64((2.0 * rng.uniform() - 1.0) * bound));
        Self {
            weights,
            bias,
            kind: LayerKind::Conv2d,
        }
    }

    pub fn init_linear(out_f: usize, in_f: usize, rng: &mut crate::Rng) -> Self {
        let bound = (1.0 / in_f as f64).sqrt();
        let weights = Tensor::from_fn(&[out_f, in_f], |_| T::of_f64((2.0 * rng.uniform() - 1.0) * bound));
        let bias = Tensor::from_fn(&[out_f], |_| T::of_f64((2.0 * rng.uniform() - 1.0) * bound));
        Self {
            weights,
            bias,
            kind: LayerKind::Linear,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn in_features(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.weights.zero_grad();
        self.bias.zero_grad();
    }
}

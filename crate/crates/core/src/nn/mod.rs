//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are NCHW tensors. Every layer exposes a forward pass that
//! leaves whatever the backward pass needs in the caller's hands, and a
//! backward pass that accumulates into the parameter gradients and returns
//! the gradient with respect to its input.

mod act;
mod conv;
mod dense;
mod init;
mod norm;
mod scalar;

pub use act::{dropout, dropout_backward, leaky_relu, leaky_relu_backward, sigmoid};
pub use conv::{conv_output_size, conv_transpose_output_size, Conv2d, ConvTranspose2d};
pub use dense::Linear;
pub use init::{max_orthogonality_error, orthogonal};
pub use norm::{BatchNorm2d, BatchNormCache};
pub use scalar::{matmul, Scalar};

/// A named, possibly learnable tensor together with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// `false` for statistics buffers such as batch-norm running moments.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
            trainable: true,
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn buffer(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::of(v.as_f64())).collect(),
            trainable: self.trainable,
        }
    }
}

/// Batch of feature maps in NCHW order. Dense activations use `h = w = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    /// Dense `n × features` activations.
    pub fn dense(n: usize, features: usize, data: Vec<T>) -> Self {
        Self::from_vec(n, features, 1, 1, data)
    }

    /// Number of values per sample.
    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let f = self.features();
        &self.data[i * f..(i + 1) * f]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let f = self.features();
        &mut self.data[i * f..(i + 1) * f]
    }

    pub fn reshape(mut self, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(c * h * w, self.features(), "reshape must preserve size");
        self.c = c;
        self.h = h;
        self.w = w;
        self
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }
}

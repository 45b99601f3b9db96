//! Dense 4-D feature maps in `(batch, channel, height, width)` layout.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tensor data length {got} does not match dims {dims:?}")]
    BadLength { dims: (usize, usize, usize, usize), got: usize },
    #[error("tensor contains a non-finite value")]
    NonFinite,
}

/// Row-major `(n, c, h, w)` tensor of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: (usize, usize, usize, usize),
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 { dims: (n, c, h, w), data: vec![0.0; n * c * h * w] }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f32) -> Self {
        Tensor4 { dims: (n, c, h, w), data: vec![value; n * c * h * w] }
    }

    pub fn from_vec(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if data.len() != n * c * h * w {
            return Err(TensorError::BadLength { dims: (n, c, h, w), got: data.len() });
        }
        Ok(Tensor4 { dims: (n, c, h, w), data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims.0
    }

    pub fn channels(&self) -> usize {
        self.dims.1
    }

    pub fn height(&self) -> usize {
        self.dims.2
    }

    pub fn width(&self) -> usize {
        self.dims.3
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let (_, cc, hh, ww) = self.dims;
        self.data[((n * cc + c) * hh + y) * ww + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let (_, cc, hh, ww) = self.dims;
        self.data[((n * cc + c) * hh + y) * ww + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

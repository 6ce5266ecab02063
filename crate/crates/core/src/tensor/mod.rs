//! Dense tensors and the reverse-mode autodiff engine.
//!
//! Everything is generic over the element type: training and inference run in
//! `f32`, gradient checking runs the identical code in `f64` where central
//! differences have enough headroom.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use optim::SgdMomentum;

use crate::error::{CoreError, Result};
use std::fmt;

/// Elementwise mean of equally sized rows.
///
/// Accumulates through the same value-ordered f64 path as the in-graph group
/// mean, so the result is exactly invariant to the order of the rows.
pub fn mean_rows<E: Element>(rows: &[Vec<E>]) -> Result<Vec<E>> {
    let Some(first) = rows.first() else {
        return Err(CoreError::EmptyBatch { op: "mean_rows" });
    };
    let width = first.len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(CoreError::ShapeMismatch {
            op: "mean_rows",
            left: vec![width],
            right: vec![rows.iter().map(|r| r.len()).max().unwrap_or(0)],
        });
    }
    let flat: Vec<E> = rows.iter().flatten().copied().collect();
    Ok(kernels::group_mean_rows(&flat, 1, rows.len(), width))
}

/// Floating-point element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense N-dimensional array, row-major, NCHW layout for image-like data.
///
/// A tensor optionally carries a gradient buffer of identical shape; the
/// graph populates it during backward passes for leaves that require grad.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let volume: usize = shape.iter().product();
        if volume != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidShape {
                shape_len: volume,
                data_len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let volume = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::ZERO; volume],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::ONE)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let volume = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; volume],
            requires_grad: false,
            grad: None,
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// (n, c, h, w) view of a 4-d shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op: "dims4",
                left: self.shape.clone(),
                right: vec![0, 0, 0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "dims2",
                left: self.shape.clone(),
                right: vec![0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulate `delta` into the gradient buffer, allocating it on demand.
    pub fn accumulate_grad(&mut self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![E::ZERO; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Lossy element-type conversion (exact for f32 -> f64).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_volume_must_match() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
    }

    #[test]
    fn cast_is_exact_for_f32_to_f64() {
        let t = Tensor::<f32>::from_vec(vec![2], vec![0.1, -3.5]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data()[0], 0.1f32 as f64);
        assert_eq!(d.data()[1], -3.5);
    }
}

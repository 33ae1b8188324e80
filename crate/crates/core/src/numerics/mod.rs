//! Dense tensors and reverse-mode differentiation.
//!
//! Everything the transformer needs is expressed as operations on a [`Tape`]:
//! each op computes its output eagerly, records how to push gradients back to
//! its inputs, and checks the result for NaN/Inf before returning it. Only
//! rank-matched elementwise ops and bias-add over the last dimension broadcast.

mod gradcheck;
mod kernels;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_with_weights};
pub use kernels::{matmul_nn, matmul_nt, matmul_tn};
pub use tape::{rope_rotate_head, AttentionSpec, Gradients, Tape, Var};

/// Element type of tensors. Training runs in `f32`; `f64` exists so gradient
/// checks are not dominated by rounding.
pub trait Real:
    Float + NumAssignOps + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }

    /// Writes `a · b` into the zeroed row-major `c [m×n]`; `a` and `b` are
    /// read through `(row, column)` strides. Callers guarantee the strides
    /// stay inside the slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]);
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]) {
        assert!(c.len() >= m * n);
        assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
        assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
        // SAFETY: the asserts above bound every address the kernel touches.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]) {
        assert!(c.len() >= m * n);
        assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
        assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
        // SAFETY: the asserts above bound every address the kernel touches.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// A dense row-major array with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor<T: Real = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> DiffTensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        check_shape(&shape, values.len())?;
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    /// Marks the tensor as trainable, allocating a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![T::zero(); self.values.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for tensors without grad.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        if let Some(g) = self.grad.as_mut() {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        Ok(())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.shape.len() {
            return Err(Error::Index(format!(
                "rank {} index into shape {:?}",
                index.len(),
                self.shape
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::Index(format!("{index:?} out of range for {:?}", self.shape)));
            }
            flat = flat * d + i;
        }
        Ok(self.values[flat])
    }

    pub fn cast<U: Real>(&self) -> DiffTensor<U> {
        DiffTensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("dims must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} values, got {len}"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite<T: Real>(op: &'static str, values: &[T]) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op,
            detail: format!("non-finite value {:?} at flat index {pos}", values[pos]),
        });
    }
    Ok(())
}

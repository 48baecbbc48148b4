//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Tape`]: every op records its parents and whatever forward values its
//! backward pass needs, and [`Tape::backward`] replays the record in reverse.

pub mod check;
mod kernels;
mod rng;
mod sampling;
mod tape;

pub use kernels::gemm;
pub use rng::{Rng, RngState};
pub use sampling::SamplePlan;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

/// Element type of every tensor buffer.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Element type of every tensor buffer.
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any gradient-tracked leaf")]
    DetachedLoss,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: format!("buffer holds {} values", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[Real]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.normal() as Real).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot hold {} values", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: Real) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other` in place.
    pub fn axpy(&mut self, s: Real, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "axpy",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Real {
        self.sum() / self.data.len() as Real
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice `index` along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Tensor {
        assert!(index < self.shape[0], "index {index} out of {:?}", self.shape);
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "stack",
            shape: vec![],
            reason: "no tensors to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they execute and replays them in
//! reverse topological order to accumulate gradients. Graphs are rebuilt
//! every training step; nothing is cached across steps. Precision is
//! generic over [`Element`] (`f32` for training, `f64` for gradient
//! checks).

mod graph;

pub use graph::{Graph, Op, TensorId};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Element dtype tag, used by the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element type for tensors.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn to_le_bytes(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn to_le_bytes(self) -> Vec<u8> {
        f32::to_le_bytes(self).to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn to_le_bytes(self) -> Vec<u8> {
        f64::to_le_bytes(self).to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Converts an `f64` constant into the element type.
pub fn el<T: Element>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in element type")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}: {detail}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

/// A dense row-major tensor buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        TensorData {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }
}

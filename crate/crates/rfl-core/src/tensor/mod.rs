//! Dense f64 tensors and a reverse-mode tape.
//!
//! A [`Buffer`] is an immutable shaped array that can be shared freely across
//! threads. A [`Tensor`] is a buffer plus an optional reference to a node on a
//! [`Tape`]. Operations on tracked tensors record enough information to run
//! [`Tape::backward`]; backward rules are themselves phrased in terms of the
//! same operations, so a tape opened with [`Tape::second_order`] can record
//! its own backward pass and differentiate through it.
//!
//! Tapes are deliberately `!Send`: a tape and every tensor tracked on it stay
//! on one thread. Cross-thread work shares detached buffers only.

mod grad;
pub mod io;
pub mod ops;
mod tape;

pub use grad::Gradients;
pub use tape::{Tape, TapeMode};

use crate::error::{Error, Result};
use std::sync::Arc;

/// Number of elements implied by a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Immutable shaped array of f64, cheap to clone and safe to share.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

impl Buffer {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Buffer> {
        if data.len() != numel(&shape) {
            return Err(Error::ShapeMismatch {
                op: "buffer",
                detail: format!("{} values cannot fill shape {:?}", data.len(), shape),
            });
        }
        Ok(Buffer {
            data: Arc::new(data),
            shape,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Buffer {
        let n = numel(&shape);
        Buffer {
            data: Arc::new(vec![0.0; n]),
            shape,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Buffer {
        let n = numel(&shape);
        Buffer {
            data: Arc::new(vec![value; n]),
            shape,
        }
    }

    pub fn scalar(value: f64) -> Buffer {
        Buffer {
            data: Arc::new(vec![value]),
            shape: vec![],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Buffer {
        let n = numel(&shape);
        Buffer {
            data: Arc::new((0..n).map(&mut f).collect()),
            shape,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element buffer.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                detail: format!("shape {:?} is not a scalar", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Same data viewed under a different shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Buffer> {
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Buffer {
            data: self.data.clone(),
            shape,
        })
    }

    /// Copy out the underlying values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Apply `f` elementwise, producing a new buffer.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Buffer {
        Buffer {
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            shape: self.shape.clone(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Slice covering sample `i` of a batch-first buffer.
    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.shape.first().copied().unwrap_or(1);
        let stride = self.data.len() / n.max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Shape of one sample of a batch-first buffer.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.shape[1..].to_vec()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Tensor {
    buf: Buffer,
    tape: Option<Tape>,
    node: Option<usize>,
}

impl Tensor {
    /// A detached constant; never accumulates gradient.
    pub fn constant(buf: Buffer) -> Tensor {
        Tensor {
            buf,
            tape: None,
            node: None,
        }
    }

    pub(crate) fn tracked(buf: Buffer, tape: Tape, node: usize) -> Tensor {
        Tensor {
            buf,
            tape: Some(tape),
            node: Some(node),
        }
    }

    pub fn buffer(&self) -> &Buffer {
        &self.buf
    }

    pub fn shape(&self) -> &[usize] {
        self.buf.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.buf.data()
    }

    pub fn numel(&self) -> usize {
        self.buf.numel()
    }

    pub fn item(&self) -> Result<f64> {
        self.buf.item()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn tape(&self) -> Option<&Tape> {
        self.tape.as_ref()
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node
    }

    /// Same value, forgetting any tape bookkeeping.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.buf.clone())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.buf.shape())
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

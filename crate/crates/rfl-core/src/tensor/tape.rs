//! The Wengert list backing reverse-mode differentiation.

use super::{Buffer, Tensor};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

/// Whether a tape can differentiate through its own backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    FirstOrder,
    SecondOrder,
}

/// Operand of a recorded operation: another node, or an embedded constant.
#[derive(Clone)]
pub(crate) enum Arg {
    Node(usize),
    Const(Buffer),
}

/// Recorded operations. Each variant stores exactly what its backward rule
/// needs: operand references plus the structural parameters of the op.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add { a: Arg, b: Arg },
    Sub { a: Arg, b: Arg },
    Mul { a: Arg, b: Arg },
    Div { a: Arg, b: Arg },
    Neg { a: Arg },
    Scale { a: Arg, c: f64 },
    AddScalar { a: Arg },
    Matmul { a: Arg, b: Arg },
    Transpose2 { a: Arg },
    Conv2d { x: Arg, w: Arg, stride: usize, pad: usize },
    // Gradient of conv2d w.r.t. its input; bilinear in (g, w).
    ConvDx { g: Arg, w: Arg, stride: usize, pad: usize },
    // Gradient of conv2d w.r.t. its kernel; bilinear in (x, g).
    ConvDw { x: Arg, g: Arg, stride: usize, pad: usize },
    AvgPool { x: Arg, k: usize, stride: usize },
    AvgUnpool { g: Arg, k: usize, stride: usize },
    Reshape { a: Arg },
    Exp { a: Arg },
    Log { a: Arg },
    Sqrt { a: Arg },
    SumAxes { a: Arg },
    BroadcastTo { a: Arg },
    GatherRows { a: Arg, idx: Arc<Vec<usize>> },
    ScatterRows { a: Arg, idx: Arc<Vec<usize>> },
}

pub(crate) struct Node {
    pub op: Op,
    pub out: Buffer,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub recording: bool,
    pub second_order: bool,
}

/// Shared handle to a recording tape. Clones refer to the same tape.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::with_mode(TapeMode::FirstOrder)
    }

    /// A tape whose backward pass is itself recorded, enabling
    /// [`Tape::backward_through_gradient`].
    pub fn second_order() -> Tape {
        Tape::with_mode(TapeMode::SecondOrder)
    }

    pub fn with_mode(mode: TapeMode) -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                recording: true,
                second_order: mode == TapeMode::SecondOrder,
            })),
        }
    }

    pub fn mode(&self) -> TapeMode {
        if self.inner.borrow().second_order {
            TapeMode::SecondOrder
        } else {
            TapeMode::FirstOrder
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Record a leaf holding `buf`. Leaves are the only tensors a caller can
    /// seed; everything else enters the tape through operations.
    pub fn leaf(&self, buf: Buffer) -> Tensor {
        let id = self.push(Op::Leaf, buf.clone());
        Tensor::tracked(buf, self.clone(), id)
    }

    pub(crate) fn push(&self, op: Op, out: Buffer) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, out });
        inner.nodes.len() - 1
    }

    pub(crate) fn node_parts(&self, id: usize) -> (Op, Buffer) {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        (node.op.clone(), node.out.clone())
    }

    /// Tensor handle pointing at an existing node.
    pub(crate) fn node_tensor(&self, id: usize) -> Tensor {
        let buf = self.inner.borrow().nodes[id].out.clone();
        Tensor::tracked(buf, self.clone(), id)
    }

    pub(crate) fn arg_tensor(&self, arg: &Arg) -> Tensor {
        match arg {
            Arg::Node(id) => self.node_tensor(*id),
            Arg::Const(buf) => Tensor::constant(buf.clone()),
        }
    }

    pub(crate) fn set_recording(&self, on: bool) -> bool {
        let mut inner = self.inner.borrow_mut();
        let was = inner.recording;
        inner.recording = on;
        was
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Restores the tape's recording flag when dropped.
pub(crate) struct RecordingGuard {
    tape: Tape,
    was: bool,
}

impl RecordingGuard {
    pub fn suspend(tape: &Tape) -> RecordingGuard {
        let was = tape.set_recording(false);
        RecordingGuard {
            tape: tape.clone(),
            was,
        }
    }
}

impl Drop for RecordingGuard {
    fn drop(&mut self) {
        self.tape.set_recording(self.was);
    }
}

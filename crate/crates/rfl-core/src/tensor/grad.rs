//! Reverse pass over a tape.
//!
//! Every rule below builds its vector-Jacobian product out of the public ops,
//! so on a second-order tape the backward pass is recorded like any other
//! computation and can be differentiated again. On a first-order tape the
//! same code runs with recording suspended and produces detached gradients.

use super::ops;
use super::tape::{Arg, Op, RecordingGuard, Tape};
use super::{Buffer, Tensor};
use crate::error::{Error, Result};

/// Gradients keyed by tape node. Tensors that the output never reached
/// report a zero gradient.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Tensor>>,
}

impl std::fmt::Debug for Gradients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let populated = self.grads.iter().filter(|g| g.is_some()).count();
        f.debug_struct("Gradients")
            .field("nodes", &self.grads.len())
            .field("populated", &populated)
            .finish()
    }
}

impl Gradients {
    /// Gradient with respect to `t`, or `None` when nothing flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        let id = t.node_id()?;
        if !self.tape.same_tape(t.tape()?) {
            return None;
        }
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `t`, materializing zeros when unreached.
    pub fn get(&self, t: &Tensor) -> Tensor {
        match self.wrt(t) {
            Some(g) => g.clone(),
            None => Tensor::constant(Buffer::zeros(t.shape().to_vec())),
        }
    }
}

impl Tape {
    /// Accumulate gradients of a scalar `out` with respect to every node.
    ///
    /// On a first-order tape the returned gradients are detached values. On a
    /// second-order tape they are tracked tensors, and a scalar built from
    /// them can be pushed through [`Tape::backward_through_gradient`].
    pub fn backward(&self, out: &Tensor) -> Result<Gradients> {
        if self.is_empty() {
            return Err(Error::EmptyTape);
        }
        let out_id = match (out.tape(), out.node_id()) {
            (Some(t), Some(id)) if self.same_tape(t) => id,
            _ => return Err(Error::NotOnTape),
        };
        if out.numel() != 1 {
            return Err(Error::NonScalarBackward {
                shape: out.shape().to_vec(),
            });
        }
        let second = self.mode() == super::TapeMode::SecondOrder;
        let _guard = if second {
            None
        } else {
            Some(RecordingGuard::suspend(self))
        };

        // On a second-order tape the seed is a tracked leaf so that every
        // returned gradient stays on the tape, even when the whole gradient
        // subgraph collapses to constants (e.g. a pure relu chain).
        let ones = Buffer::full(out.shape().to_vec(), 1.0);
        let seed = if second {
            self.leaf(ones)
        } else {
            Tensor::constant(ones)
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; out_id + 1];
        grads[out_id] = Some(seed);

        for id in (0..=out_id).rev() {
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            let (op, out_buf) = self.node_parts(id);
            let contributions = self.vjp(&op, id, &out_buf, &g)?;
            for (target, piece) in contributions {
                grads[target] = Some(match grads[target].take() {
                    None => piece,
                    Some(prev) => ops::add(&prev, &piece)?,
                });
            }
        }
        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }

    /// Differentiate a scalar that was built from gradients returned by
    /// [`Tape::backward`] on a second-order tape.
    pub fn backward_through_gradient(&self, scalar: &Tensor) -> Result<Gradients> {
        if self.mode() != super::TapeMode::SecondOrder {
            return Err(Error::NotSecondOrder);
        }
        self.backward(scalar)
    }

    /// VJP of one node: pairs of (input node id, gradient contribution).
    /// Constant operands absorb no gradient and are skipped.
    fn vjp(&self, op: &Op, node_id: usize, out_buf: &Buffer, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let mut out = Vec::with_capacity(2);
        let mut push = |arg: &Arg, grad: Tensor| {
            if let Arg::Node(id) = arg {
                out.push((*id, grad));
            }
        };
        let at = |arg: &Arg| self.arg_tensor(arg);
        // Tensor view of this node's own output, used by exp and sqrt.
        let self_out = || Tensor::tracked(out_buf.clone(), self.clone(), node_id);

        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                push(a, g.clone());
                push(b, g.clone());
            }
            Op::Sub { a, b } => {
                push(a, g.clone());
                push(b, ops::neg(g)?);
            }
            Op::Mul { a, b } => {
                push(a, ops::mul(g, &at(b))?);
                push(b, ops::mul(g, &at(a))?);
            }
            Op::Div { a, b } => {
                let bt = at(b);
                push(a, ops::div(g, &bt)?);
                if let Arg::Node(_) = b {
                    let b2 = ops::mul(&bt, &bt)?;
                    let quotient = ops::div(&at(a), &b2)?;
                    push(b, ops::neg(&ops::mul(g, &quotient)?)?);
                }
            }
            Op::Neg { a } => push(a, ops::neg(g)?),
            Op::Scale { a, c } => push(a, ops::scale(g, *c)?),
            Op::AddScalar { a } => push(a, g.clone()),
            Op::Matmul { a, b } => {
                push(a, ops::matmul(g, &ops::transpose2(&at(b))?)?);
                push(b, ops::matmul(&ops::transpose2(&at(a))?, g)?);
            }
            Op::Transpose2 { a } => push(a, ops::transpose2(g)?),
            Op::Conv2d { x, w, stride, pad } => {
                let xt = at(x);
                let (in_h, in_w) = (xt.shape()[2], xt.shape()[3]);
                if let Arg::Node(_) = x {
                    push(x, ops::conv2d_dx(g, &at(w), *stride, *pad, in_h, in_w)?);
                }
                if let Arg::Node(_) = w {
                    let ws = at(w);
                    let (kh, kw) = (ws.shape()[2], ws.shape()[3]);
                    push(w, ops::conv2d_dw(&xt, g, *stride, *pad, kh, kw)?);
                }
            }
            Op::ConvDx { g: g0, w, stride, pad } => {
                push(g0, ops::conv2d(g, &at(w), *stride, *pad)?);
                if let Arg::Node(_) = w {
                    let ws = at(w);
                    let (kh, kw) = (ws.shape()[2], ws.shape()[3]);
                    push(w, ops::conv2d_dw(g, &at(g0), *stride, *pad, kh, kw)?);
                }
            }
            Op::ConvDw { x, g: g0, stride, pad } => {
                if let Arg::Node(_) = x {
                    let xs = at(x);
                    let (in_h, in_w) = (xs.shape()[2], xs.shape()[3]);
                    push(x, ops::conv2d_dx(&at(g0), g, *stride, *pad, in_h, in_w)?);
                }
                push(g0, ops::conv2d(&at(x), g, *stride, *pad)?);
            }
            Op::AvgPool { x, k, stride } => {
                let xs = at(x);
                let (in_h, in_w) = (xs.shape()[2], xs.shape()[3]);
                push(x, ops::avg_unpool(g, *k, *stride, in_h, in_w)?);
            }
            Op::AvgUnpool { g: g0, k, stride, .. } => {
                push(g0, ops::avg_pool(g, *k, *stride)?);
            }
            Op::Reshape { a } => {
                let shape = at(a).shape().to_vec();
                push(a, ops::reshape(g, &shape)?);
            }
            Op::Exp { a } => push(a, ops::mul(g, &self_out())?),
            Op::Log { a } => push(a, ops::div(g, &at(a))?),
            Op::Sqrt { a } => {
                let half = ops::scale(g, 0.5)?;
                push(a, ops::div(&half, &self_out())?);
            }
            Op::SumAxes { a, .. } => {
                let shape = at(a).shape().to_vec();
                push(a, ops::broadcast_to(g, &shape)?);
            }
            Op::BroadcastTo { a } => {
                let in_shape = at(a).shape().to_vec();
                let axes: Vec<usize> = in_shape
                    .iter()
                    .zip(out_buf.shape().iter())
                    .enumerate()
                    .filter(|(_, (&i, &o))| i == 1 && o != 1)
                    .map(|(d, _)| d)
                    .collect();
                push(a, ops::sum_axes(g, &axes)?);
            }
            Op::GatherRows { a, idx } => {
                let cols = at(a).shape()[1];
                push(a, ops::scatter_rows(g, idx, cols)?);
            }
            Op::ScatterRows { a, idx, .. } => {
                push(a, ops::gather_rows(g, idx)?);
            }
        }
        Ok(out)
    }
}

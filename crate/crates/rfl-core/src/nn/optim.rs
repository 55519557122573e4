//! First-order optimizers over named parameter buffers. Weight decay is
//! coupled: it joins the raw gradient before any momentum or scaling.

use crate::error::{Error, Result};
use crate::tensor::Buffer;
use std::collections::BTreeMap;

const SGD_MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
    Adagrad,
}

impl OptimizerKind {
    pub fn to_text(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adagrad => "adagrad",
        }
    }

    pub fn from_text(s: &str) -> Result<OptimizerKind> {
        match s {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct State {
    /// sgd: velocity; adam: first moment; adagrad: unused.
    m: Vec<f64>,
    /// adam: second moment; adagrad: accumulated squared gradient.
    v: Vec<f64>,
}

/// Optimizer with per-parameter state, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: BTreeMap<String, State>,
    /// Completed steps, for Adam's bias correction.
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        Optimizer { kind, state: BTreeMap::new(), t: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update over every parameter. Parameters absent from `grads`
    /// see a zero raw gradient (weight decay still applies).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Buffer>,
        grads: &BTreeMap<String, Buffer>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t;
        for (name, theta) in params.iter_mut() {
            let n = theta.numel();
            if let Some(g) = grads.get(name) {
                if g.shape() != theta.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "optimizer_step",
                        detail: format!(
                            "{name}: gradient {:?} vs parameter {:?}",
                            g.shape(),
                            theta.shape()
                        ),
                    });
                }
            }
            let zero = vec![0.0; n];
            let raw = grads.get(name).map(|g| g.data()).unwrap_or(&zero);
            let st = self.state.entry(name.clone()).or_insert_with(|| State {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let td = theta.data();
            let mut next = vec![0.0; n];
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for i in 0..n {
                        let g = raw[i] + weight_decay * td[i];
                        st.m[i] = SGD_MOMENTUM * st.m[i] + g;
                        next[i] = td[i] - lr * st.m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    for i in 0..n {
                        let g = raw[i] + weight_decay * td[i];
                        st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g;
                        st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let mh = st.m[i] / c1;
                        let vh = st.v[i] / c2;
                        next[i] = td[i] - lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Adagrad => {
                    for i in 0..n {
                        let g = raw[i] + weight_decay * td[i];
                        st.v[i] += g * g;
                        next[i] = td[i] - lr * g / (st.v[i].sqrt() + ADAGRAD_EPS);
                    }
                }
            }
            *theta = Buffer::new(next, theta.shape().to_vec())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Buffer> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Buffer::full(vec![1], v));
        m
    }

    fn grad(v: f64) -> BTreeMap<String, Buffer> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Buffer::full(vec![1], v));
        m
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum);
        let mut p = single(1.0);
        opt.step(&mut p, &grad(1.0), 0.1, 0.0).unwrap();
        assert!((p["w"].data()[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &grad(1.0), 0.1, 0.0).unwrap();
        // velocity 0.9 * 1 + 1 = 1.9, so 0.9 - 0.19 = 0.71
        assert!((p["w"].data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn first_step_with_zero_gradient_shrinks_by_coupled_decay() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adagrad] {
            let mut opt = Optimizer::new(kind);
            let mut p = single(2.0);
            let lr = 0.1;
            let wd = 0.05;
            opt.step(&mut p, &BTreeMap::new(), lr, wd).unwrap();
            let got = p["w"].data()[0];
            let want = match kind {
                // adagrad normalizes the decay gradient by its own magnitude
                OptimizerKind::Adagrad => 2.0 - lr * 0.1 / (0.1 + 1e-10),
                _ => 2.0 * (1.0 - lr * wd),
            };
            assert!((got - want).abs() < 1e-12, "{kind:?}: {got} vs {want}");
        }
    }

    #[test]
    fn adam_first_step_is_a_signed_learning_rate_step() {
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        let mut p = single(0.0);
        opt.step(&mut p, &grad(0.5), 0.01, 0.0).unwrap();
        let got = p["w"].data()[0];
        let want = -0.01 * 0.5 / (0.5 + 1e-8);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn adagrad_steps_shrink_as_history_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::Adagrad);
        let mut p = single(1.0);
        opt.step(&mut p, &grad(2.0), 0.1, 0.0).unwrap();
        let after_one = p["w"].data()[0];
        assert!((after_one - (1.0 - 0.1 * 2.0 / (2.0 + 1e-10))).abs() < 1e-12);
        opt.step(&mut p, &grad(2.0), 0.1, 0.0).unwrap();
        let second_step = after_one - p["w"].data()[0];
        let want = 0.1 * 2.0 / (8.0f64.sqrt() + 1e-10);
        assert!((second_step - want).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_between_gradient_and_parameter_is_rejected() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum);
        let mut p = single(1.0);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Buffer::zeros(vec![2]));
        assert!(opt.step(&mut p, &g, 0.1, 0.0).is_err());
    }
}

//! Loss-landscape probes along the descent direction.
//!
//! Each probe evaluates the loss and gradient at a parameter point, steps
//! along the negative gradient at several multiples of the learning rate,
//! and summarizes what it finds: the loss band across the probes, how much
//! the gradient rotates after one nominal step, and an effective smoothness
//! ratio. Repeating the probe during training yields a trace of how sharp
//! the surface is where the optimizer walks.

use super::csv::{fmt_f64, Table};
use crate::error::Result;
use crate::nn::{Mode, Model};
use crate::tensor::{ops, Buffer, Tape, TapeMode, Tensor};
use std::collections::BTreeMap;

/// Step multiples probed along the descent direction. The 1.0 entry is the
/// nominal optimizer step and anchors `grad_change`.
pub const PROBE_MULTIPLES: [f64; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

/// One landscape measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    /// Caller-supplied position of the probe, usually a training step.
    pub step: usize,
    /// Loss at the unperturbed parameters.
    pub base_loss: f64,
    /// Smallest finite loss among the probes; infinite when every probe
    /// overflowed.
    pub band_min: f64,
    /// Largest finite loss among the probes; infinite when every probe
    /// overflowed.
    pub band_max: f64,
    /// Gradient distance after the nominal step, `‖g(θ − lr·g) − g(θ)‖`.
    pub grad_change: f64,
    /// Largest `‖g(θ') − g(θ)‖ / ‖θ' − θ‖` over the finite probes: a local
    /// smoothness estimate along the descent line.
    pub beta: f64,
    /// Whether any probe produced a non-finite loss.
    pub saturated: bool,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Probes the loss surface at `theta` along its negative gradient. `eval`
/// returns the loss and gradient at a parameter vector; `lr` scales the
/// probe distances and `step` is recorded verbatim.
pub fn probe_step<F>(theta: &[f64], lr: f64, step: usize, eval: &F) -> ProbePoint
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (base_loss, g0) = eval(theta);
    let gnorm = l2(&g0);
    if gnorm == 0.0 {
        return ProbePoint {
            step,
            base_loss,
            band_min: base_loss,
            band_max: base_loss,
            grad_change: 0.0,
            beta: 0.0,
            saturated: false,
        };
    }

    let mut band_min = f64::INFINITY;
    let mut band_max = f64::NEG_INFINITY;
    let mut grad_change = f64::INFINITY;
    let mut beta = 0.0f64;
    let mut any_finite = false;
    let mut saturated = false;
    for &m in &PROBE_MULTIPLES {
        let probe: Vec<f64> =
            theta.iter().zip(&g0).map(|(t, g)| t - m * lr * g).collect();
        let (lm, gm) = eval(&probe);
        if !lm.is_finite() {
            saturated = true;
            continue;
        }
        any_finite = true;
        band_min = band_min.min(lm);
        band_max = band_max.max(lm);
        let dist = l2_diff(&gm, &g0);
        if m == 1.0 {
            grad_change = dist;
        }
        beta = beta.max(dist / (m * lr * gnorm));
    }
    if !any_finite {
        // Every probe overflowed; leave infinite sentinels everywhere.
        band_max = f64::INFINITY;
        beta = f64::INFINITY;
    }
    ProbePoint { step, base_loss, band_min, band_max, grad_change, beta, saturated }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandscapeTrace {
    pub points: Vec<ProbePoint>,
}

impl LandscapeTrace {
    pub fn to_table(&self) -> Result<Table> {
        let mut t = Table::new(&[
            "step",
            "base_loss",
            "band_min",
            "band_max",
            "grad_change",
            "beta",
            "saturated",
        ]);
        for p in &self.points {
            t.push_row(vec![
                p.step.to_string(),
                fmt_f64(p.base_loss),
                fmt_f64(p.band_min),
                fmt_f64(p.band_max),
                fmt_f64(p.grad_change),
                fmt_f64(p.beta),
                p.saturated.to_string(),
            ])?;
        }
        Ok(t)
    }
}

fn eval_model_at(
    model: &Model,
    shapes: &[(String, Vec<usize>)],
    x: &Tensor,
    labels: &[usize],
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::with_mode(TapeMode::FirstOrder);
    let mut params = BTreeMap::new();
    let mut leaves = Vec::new();
    let mut off = 0;
    for (name, shape) in shapes {
        let len: usize = shape.iter().product();
        let leaf = tape.leaf(Buffer::new(theta[off..off + len].to_vec(), shape.clone())?);
        params.insert(name.clone(), leaf.clone());
        leaves.push(leaf);
        off += len;
    }
    // Batch statistics, because the probe measures the surface the
    // optimizer actually descends; running averages stay untouched.
    let fwd = model.frozen_forward(&params, x, Mode::Train)?;
    let ce = ops::softmax_cross_entropy(&fwd.logits, labels)?;
    let loss = ce.mean.data()[0];
    let grads = tape.backward(&ce.mean)?;
    let mut g = Vec::with_capacity(theta.len());
    for leaf in &leaves {
        let gt = grads.get(leaf);
        g.extend_from_slice(gt.data());
    }
    Ok((loss, g))
}

/// Probes the model's training loss surface on one batch. Parameters are
/// flattened in name order; the model itself is left untouched.
pub fn landscape_probe(
    model: &Model,
    images: &Buffer,
    labels: &[usize],
    lr: f64,
    step: usize,
) -> Result<ProbePoint> {
    let shapes: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.shape().to_vec()))
        .collect();
    let theta: Vec<f64> = model.params.values().flat_map(|b| b.data().to_vec()).collect();
    let x = Tensor::constant(images.clone());

    // Surface shape or label errors once, up front; after this succeeds the
    // probe closure only moves parameter values, which cannot fail.
    eval_model_at(model, &shapes, &x, labels, &theta)?;
    let eval = |t: &[f64]| {
        eval_model_at(model, &shapes, &x, labels, t)
            .expect("probe evaluation succeeded at the base point")
    };
    Ok(probe_step(&theta, lr, step, &eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::nn::{Arch, ModelConfig, NormKind};

    #[test]
    fn quadratic_bowl_has_unit_smoothness_and_a_descending_band() {
        let eval = |t: &[f64]| {
            let loss = 0.5 * t.iter().map(|v| v * v).sum::<f64>();
            (loss, t.to_vec())
        };
        let theta = [1.0, 2.0];
        let p = probe_step(&theta, 0.1, 0, &eval);
        // On ½‖θ‖² the gradient moves exactly as far as the parameters, so
        // the smoothness ratio is 1 at every multiple.
        assert!((p.beta - 1.0).abs() < 1e-12, "beta {}", p.beta);
        assert!(p.band_max < p.base_loss);
        assert!(p.band_min < p.band_max);
        let expected = 0.1 * (5.0f64).sqrt();
        assert!((p.grad_change - expected).abs() < 1e-12);
        assert!(!p.saturated);
    }

    #[test]
    fn linear_slope_has_zero_curvature() {
        let a = [3.0, -1.0, 2.0];
        let eval = move |t: &[f64]| {
            let loss: f64 = t.iter().zip(&a).map(|(x, c)| x * c).sum();
            (loss, a.to_vec())
        };
        let p = probe_step(&[1.0, 1.0, 1.0], 0.05, 3, &eval);
        assert_eq!(p.grad_change, 0.0);
        assert_eq!(p.beta, 0.0);
        assert_eq!(p.step, 3);
        // Descending a linear slope only ever lowers the loss.
        assert!(p.band_max < p.base_loss);
    }

    #[test]
    fn zero_gradient_collapses_the_band_to_the_base_loss() {
        let eval = |_: &[f64]| (3.25, vec![0.0; 4]);
        let p = probe_step(&[0.0; 4], 0.1, 0, &eval);
        assert_eq!((p.band_min, p.band_max), (3.25, 3.25));
        assert_eq!(p.base_loss, 3.25);
        assert_eq!(p.beta, 0.0);
        assert!(!p.saturated);
    }

    #[test]
    fn overflowing_probes_set_the_saturated_flag_and_sentinels() {
        let base = [1.0, 1.0];
        let eval = move |t: &[f64]| {
            if t == &base[..] {
                (1.0, vec![1.0, 1.0])
            } else {
                (f64::INFINITY, vec![f64::INFINITY; 2])
            }
        };
        let p = probe_step(&base, 0.1, 0, &eval);
        assert!(p.saturated);
        assert!(p.band_min.is_infinite() && p.band_max.is_infinite());
        assert!(p.beta.is_infinite());
    }

    #[test]
    fn model_probe_is_deterministic_and_descends_locally() {
        let data = generate(&SyntheticSpec {
            n_per_class: 8,
            test_per_class: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            arch: Arch::Mlp,
            depth: 2,
            width: 8,
            norm: NormKind::None,
            ..ModelConfig::default()
        };
        let model = Model::build(&cfg, 0).unwrap();
        let p = landscape_probe(&model, &data.train.images, &data.train.labels, 1e-3, 5).unwrap();
        assert!(p.base_loss.is_finite());
        assert!(!p.saturated);
        // A small step along the gradient lowers a smooth loss.
        assert!(p.band_min < p.base_loss);
        assert!(p.beta > 0.0 && p.beta.is_finite());
        let q = landscape_probe(&model, &data.train.images, &data.train.labels, 1e-3, 5).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn traces_render_one_row_per_point() {
        let p = ProbePoint {
            step: 0,
            base_loss: 1.5,
            band_min: 1.0,
            band_max: 2.0,
            grad_change: 0.25,
            beta: 0.5,
            saturated: false,
        };
        let trace = LandscapeTrace { points: vec![p, ProbePoint { step: 1, ..p }] };
        let t = trace.to_table().unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[1][0], "1");
        assert_eq!(t.rows[0][6], "false");
        let parsed = Table::parse(&t.to_text().unwrap()).unwrap();
        assert_eq!(parsed, t);
    }
}

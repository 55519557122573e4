//! Normalization layers. Instance, layer, and group normalization are one
//! function parameterized by group count; batch normalization adds running
//! statistics with the usual exponential update.

use super::{Mode, NormKind};
use crate::error::{Error, Result};
use crate::tensor::{ops, Buffer, Tensor};
use std::collections::BTreeMap;

/// Exponential running statistics for one batch-norm site.
#[derive(Clone, Debug)]
pub struct RunningStat {
    pub mean: Buffer,
    pub var: Buffer,
}

/// Whether a forward pass may update running statistics.
pub enum RunningView<'a> {
    Frozen(&'a BTreeMap<String, RunningStat>),
    Updating(&'a mut BTreeMap<String, RunningStat>),
}

/// Applies the per-channel affine pair to a normalized `[N, C, H, W]`.
fn affine(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = gamma.numel();
    let shape = xhat.shape().to_vec();
    let g = ops::broadcast_to(&ops::reshape(gamma, &[1, c, 1, 1])?, &shape)?;
    let b = ops::broadcast_to(&ops::reshape(beta, &[1, c, 1, 1])?, &shape)?;
    ops::add(&ops::mul(xhat, &g)?, &b)
}

/// Normalizes over channel groups within each sample. `groups = 1` is
/// layer normalization, `groups = C` is instance normalization.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            detail: format!("expected [N, C, H, W], got {s:?}"),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidConfig(format!(
            "group norm: {groups} groups do not divide {c} channels"
        )));
    }
    let per = c / groups * h * w;
    let flat = ops::reshape(x, &[n * groups, per])?;
    let mean = ops::mean_axes(&flat, &[1])?;
    let var = ops::var_axes(&flat, &[1])?;
    let centered = ops::sub(&flat, &ops::broadcast_to(&mean, &[n * groups, per])?)?;
    let denom = ops::sqrt(&ops::add_scalar(&var, eps)?)?;
    let xhat = ops::div(&centered, &ops::broadcast_to(&denom, &[n * groups, per])?)?;
    affine(&ops::reshape(&xhat, &s)?, gamma, beta)
}

/// Train-mode batch normalization: statistics over `(N, H, W)` per
/// channel. Returns the output plus the detached batch statistics for the
/// running update.
fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Buffer, Buffer)> {
    let s = x.shape().to_vec();
    let mean = ops::mean_axes(x, &[0, 2, 3])?;
    let var = ops::var_axes(x, &[0, 2, 3])?;
    let centered = ops::sub(x, &ops::broadcast_to(&mean, &s)?)?;
    let denom = ops::sqrt(&ops::add_scalar(&var, eps)?)?;
    let xhat = ops::div(&centered, &ops::broadcast_to(&denom, &s)?)?;
    let out = affine(&xhat, gamma, beta)?;
    let c = s[1];
    Ok((
        out,
        mean.buffer().reshaped(vec![c])?,
        var.buffer().reshaped(vec![c])?,
    ))
}

/// Eval-mode batch normalization from stored running statistics.
fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    stat: &RunningStat,
) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let c = s[1];
    let mean = Tensor::constant(stat.mean.reshaped(vec![1, c, 1, 1])?);
    let var = Tensor::constant(stat.var.reshaped(vec![1, c, 1, 1])?);
    let centered = ops::sub(x, &ops::broadcast_to(&mean, &s)?)?;
    let denom = ops::sqrt(&ops::add_scalar(&var, eps)?)?;
    let xhat = ops::div(&centered, &ops::broadcast_to(&denom, &s)?)?;
    affine(&xhat, gamma, beta)
}

/// One normalization site. `site` keys the running statistics and names
/// the layer in errors. Batch norm seeds its running statistics at
/// (mean 0, var 1) on the first training step and thereafter applies
/// r <- (1 - momentum) * r + momentum * batch_stat.
#[allow(clippy::too_many_arguments)]
pub fn normalize(
    x: &Tensor,
    kind: NormKind,
    site: &str,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f64,
    momentum: f64,
    mode: Mode,
    view: &mut RunningView<'_>,
) -> Result<Tensor> {
    if kind == NormKind::None {
        return Ok(x.clone());
    }
    let (gamma, beta) = match (gamma, beta) {
        (Some(g), Some(b)) => (g, b),
        _ => {
            return Err(Error::InvalidConfig(format!(
                "normalization site {site} is missing its affine parameters"
            )))
        }
    };
    let channels = x.shape()[1];
    match kind {
        NormKind::None => unreachable!(),
        NormKind::Layer => group_norm(x, 1, gamma, beta, eps),
        NormKind::Instance => group_norm(x, channels, gamma, beta, eps),
        NormKind::Group(g) => group_norm(x, g, gamma, beta, eps),
        NormKind::Batch => match mode {
            Mode::Train => {
                let (out, bmean, bvar) = batch_norm_train(x, gamma, beta, eps)?;
                if let RunningView::Updating(map) = view {
                    let entry = map.entry(site.to_string()).or_insert_with(|| RunningStat {
                        mean: Buffer::zeros(vec![channels]),
                        var: Buffer::full(vec![channels], 1.0),
                    });
                    entry.mean = Buffer::from_fn(vec![channels], |i| {
                        (1.0 - momentum) * entry.mean.data()[i] + momentum * bmean.data()[i]
                    });
                    entry.var = Buffer::from_fn(vec![channels], |i| {
                        (1.0 - momentum) * entry.var.data()[i] + momentum * bvar.data()[i]
                    });
                }
                Ok(out)
            }
            Mode::Eval => {
                let map = match view {
                    RunningView::Frozen(m) => *m,
                    RunningView::Updating(m) => &**m,
                };
                let stat = map.get(site).ok_or(Error::UninitializedRunningStats)?;
                batch_norm_eval(x, gamma, beta, eps, stat)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor {
        Tensor::constant(Buffer::full(vec![c], 1.0))
    }

    fn zeros(c: usize) -> Tensor {
        Tensor::constant(Buffer::zeros(vec![c]))
    }

    #[test]
    fn batch_values_one_and_three_normalize_to_plus_minus_one() {
        let x = Tensor::constant(Buffer::new(vec![1.0, 3.0], vec![2, 1, 1, 1]).unwrap());
        let mut map = BTreeMap::new();
        let mut view = RunningView::Updating(&mut map);
        let out = normalize(
            &x,
            NormKind::Batch,
            "t",
            Some(&ones(1)),
            Some(&zeros(1)),
            0.0,
            0.1,
            Mode::Train,
            &mut view,
        )
        .unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn running_statistics_update_from_their_documented_seeds() {
        // Batch mean 2, variance 1: the first update moves mean 0 -> 0.2
        // and leaves var at (1 - 0.1) * 1 + 0.1 * 1 = 1.
        let x = Tensor::constant(Buffer::new(vec![1.0, 3.0], vec![2, 1, 1, 1]).unwrap());
        let mut map = BTreeMap::new();
        let mut view = RunningView::Updating(&mut map);
        normalize(
            &x,
            NormKind::Batch,
            "site",
            Some(&ones(1)),
            Some(&zeros(1)),
            0.0,
            0.1,
            Mode::Train,
            &mut view,
        )
        .unwrap();
        let stat = &map["site"];
        assert!((stat.mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((stat.var.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eval_before_any_training_step_reports_uninitialized_stats() {
        let x = Tensor::constant(Buffer::zeros(vec![2, 3, 2, 2]));
        let map = BTreeMap::new();
        let mut view = RunningView::Frozen(&map);
        let err = normalize(
            &x,
            NormKind::Batch,
            "s",
            Some(&ones(3)),
            Some(&zeros(3)),
            1e-5,
            0.1,
            Mode::Eval,
            &mut view,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UninitializedRunningStats));
    }

    #[test]
    fn layer_and_instance_are_the_unit_and_full_group_counts() {
        let x = Tensor::constant(Buffer::from_fn(vec![2, 4, 2, 2], |i| (i as f64).sin()));
        let map = BTreeMap::new();
        let run = |kind: NormKind| {
            let mut view = RunningView::Frozen(&map);
            normalize(
                &x,
                kind,
                "s",
                Some(&ones(4)),
                Some(&zeros(4)),
                1e-5,
                0.1,
                Mode::Eval,
                &mut view,
            )
            .unwrap()
            .buffer()
            .to_vec()
        };
        assert_eq!(run(NormKind::Layer), run(NormKind::Group(1)));
        assert_eq!(run(NormKind::Instance), run(NormKind::Group(4)));
        assert_ne!(run(NormKind::Layer), run(NormKind::Instance));
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = Tensor::constant(Buffer::zeros(vec![1, 6, 2, 2]));
        let err = group_norm(&x, 4, &ones(6), &zeros(6), 1e-5).unwrap_err();
        match err {
            Error::InvalidConfig(msg) => assert!(msg.contains("4 groups"), "{msg}"),
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn train_mode_pre_affine_output_has_zero_mean_and_adjusted_unit_variance() {
        let eps = 1e-5;
        let x = Tensor::constant(Buffer::from_fn(vec![4, 3, 5, 5], |i| {
            (i as f64 * 0.37).sin() * 2.0 + (i % 7) as f64
        }));
        let mut map = BTreeMap::new();
        let mut view = RunningView::Updating(&mut map);
        let out = normalize(
            &x,
            NormKind::Batch,
            "s",
            Some(&ones(3)),
            Some(&zeros(3)),
            eps,
            0.1,
            Mode::Train,
            &mut view,
        )
        .unwrap();
        let (n, c, hw) = (4, 3, 25);
        for ch in 0..c {
            let mut vals = Vec::new();
            for b in 0..n {
                for p in 0..hw {
                    vals.push(out.data()[(b * c + ch) * hw + p]);
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            let batch_var = map["s"].var.data()[ch] * 10.0; // first update is 0.9*1 + 0.1*v
            let batch_var = batch_var - 9.0;
            let want_v = batch_var / (batch_var + eps);
            assert!(m.abs() < 1e-10, "channel {ch} mean {m}");
            assert!((v - want_v).abs() < 1e-6, "channel {ch} var {v} vs {want_v}");
        }
    }
}

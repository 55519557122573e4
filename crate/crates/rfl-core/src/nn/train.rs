//! Minibatch training with a decaying learning rate, optional adversarial
//! example substitution, and an optional gradient-alignment penalty.

use super::{Mode, Model, Optimizer, OptimizerKind};
use crate::attacks::{run_attack, AttackConfig, NormBall};
use crate::config::Kv;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, PerturbationSpec};
use crate::rng::{stream, stream_rng};
use crate::tensor::{ops, Buffer, Tape, TapeMode, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Shared evaluation protocol: an l2 ball of this radius,
pub const EVAL_ATTACK_EPS: f64 = 0.25;
/// this many ascent steps,
pub const EVAL_ATTACK_STEPS: usize = 10;
/// and at most this many test samples per measurement.
pub const EVAL_SAMPLE_CAP: usize = 1000;

/// Sigma for the per-epoch gradient-similarity readout.
const EVAL_LIGS_SIGMA: f64 = 0.01;

/// How the gradient-alignment penalty is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LigsMode {
    /// Exact cosine between the two input gradients, differentiated
    /// through the recorded backward pass.
    DoubleBackprop,
    /// First-order proxy: how far the loss at the shifted point departs
    /// from its linearization, no second derivatives needed.
    LinearitySurrogate,
}

impl LigsMode {
    pub fn to_text(self) -> &'static str {
        match self {
            LigsMode::DoubleBackprop => "double_backprop",
            LigsMode::LinearitySurrogate => "linearity_surrogate",
        }
    }

    pub fn from_text(s: &str) -> Result<LigsMode> {
        match s {
            "double_backprop" => Ok(LigsMode::DoubleBackprop),
            "linearity_surrogate" => Ok(LigsMode::LinearitySurrogate),
            other => Err(Error::Config(format!("unknown alignment mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// When set, every training batch is replaced by its adversarial copy.
    pub adversarial: Option<AttackConfig>,
    /// Weight of the gradient-alignment penalty; zero disables it.
    pub ligs_lambda: f64,
    pub ligs_mode: LigsMode,
    /// Scale of the random shift used by the penalty.
    pub ligs_sigma: f64,
    /// Compute accuracy and similarity readouts after each epoch.
    pub eval_epochs: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            lr: 0.01,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            optimizer: OptimizerKind::SgdMomentum,
            seed: 0,
            adversarial: None,
            ligs_lambda: 0.0,
            ligs_mode: LigsMode::DoubleBackprop,
            ligs_sigma: 0.01,
            eval_epochs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay_factor {} outside (0, 1]",
                self.lr_decay_factor
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        if self.ligs_lambda < 0.0 {
            return Err(Error::InvalidConfig("ligs_lambda must be nonnegative".into()));
        }
        if !(self.ligs_sigma > 0.0) {
            return Err(Error::InvalidConfig("ligs_sigma must be positive".into()));
        }
        if let Some(atk) = &self.adversarial {
            atk.validate()?;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.lr_decay_factor.powi(hits as i32)
    }

    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        if !self.lr_decay_epochs.is_empty() {
            let joined: Vec<String> =
                self.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
            kv.set("lr_decay_epochs", joined.join(","));
        }
        kv.set("lr_decay_factor", self.lr_decay_factor);
        kv.set("weight_decay", self.weight_decay);
        kv.set("optimizer", self.optimizer.to_text());
        kv.set("seed", self.seed);
        kv.set("ligs_lambda", self.ligs_lambda);
        kv.set("ligs_mode", self.ligs_mode.to_text());
        kv.set("ligs_sigma", self.ligs_sigma);
        kv.set("eval_epochs", self.eval_epochs);
        if let Some(atk) = &self.adversarial {
            let akv = atk.to_kv();
            for key in akv.keys() {
                kv.set(&format!("attack.{key}"), akv.get(key).unwrap());
            }
        }
        kv
    }

    pub fn from_kv(kv: &Kv) -> Result<TrainConfig> {
        let def = TrainConfig::default();
        let mut r = kv.reader();
        let cfg = TrainConfig {
            epochs: r.usize_or("epochs", def.epochs)?,
            batch_size: r.usize_or("batch_size", def.batch_size)?,
            lr: r.f64_or("lr", def.lr)?,
            lr_decay_epochs: r.usize_list_or("lr_decay_epochs", &[])?,
            lr_decay_factor: r.f64_or("lr_decay_factor", def.lr_decay_factor)?,
            weight_decay: r.f64_or("weight_decay", def.weight_decay)?,
            optimizer: OptimizerKind::from_text(&r.str_or("optimizer", def.optimizer.to_text()))?,
            seed: r.u64_or("seed", def.seed)?,
            adversarial: {
                let akv = r.section("attack");
                if akv.is_empty() { None } else { Some(AttackConfig::from_kv(&akv)?) }
            },
            ligs_lambda: r.f64_or("ligs_lambda", def.ligs_lambda)?,
            ligs_mode: LigsMode::from_text(&r.str_or("ligs_mode", def.ligs_mode.to_text()))?,
            ligs_sigma: r.f64_or("ligs_sigma", def.ligs_sigma)?,
            eval_epochs: r.bool_or("eval_epochs", def.eval_epochs)?,
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// End-of-epoch readout. Accuracy fields are NaN when epoch evaluation
/// is disabled; similarity is NaN when every test gradient vanished.
#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub ligs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// Hooks into the training loop. The epoch hook runs after the metrics
/// row is complete; returning an error aborts training.
#[derive(Default)]
pub struct TrainCallback<'a> {
    #[allow(clippy::type_complexity)]
    pub on_epoch_end: Option<Box<dyn FnMut(&Model, &EpochRow) -> Result<()> + 'a>>,
}

/// The attack used for robustness readouts everywhere: bounded l2,
/// shared radius, step count, and best-iterate selection.
pub fn eval_attack() -> AttackConfig {
    AttackConfig {
        norm: NormBall::L2,
        eps: EVAL_ATTACK_EPS,
        steps: EVAL_ATTACK_STEPS,
        ..AttackConfig::default()
    }
}

/// Per-sample gaussian shifts for the alignment penalty.
fn penalty_shift(cfg: &TrainConfig, epoch: usize, batch: usize, shape: &[usize]) -> Buffer {
    let n = shape[0];
    let per: usize = shape[1..].iter().product();
    let mut data = vec![0.0; n * per];
    for smp in 0..n {
        let mut rng = stream_rng(
            cfg.seed,
            stream::LIGS,
            &[epoch as u64, batch as u64, smp as u64],
        );
        for v in &mut data[smp * per..(smp + 1) * per] {
            *v = cfg.ligs_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Buffer::new(data, shape.to_vec()).expect("shift shape mirrors the batch")
}

/// First `EVAL_SAMPLE_CAP` rows of the test set, in stored order.
fn eval_slice(test: &Dataset) -> Result<Dataset> {
    if test.len() <= EVAL_SAMPLE_CAP {
        return Ok(test.clone());
    }
    let idx: Vec<usize> = (0..EVAL_SAMPLE_CAP).collect();
    test.subset(&idx)
}

/// Trains `model` in place and reports one metrics row per epoch.
pub fn train(
    model: &mut Model,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    callback: &mut TrainCallback,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let eval_set = eval_slice(test_ds)?;
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;

        for (bidx, (mut x, y)) in
            batches(train_ds, cfg.batch_size, Some((cfg.seed, epoch as u64))).enumerate()
        {
            if let Some(atk) = &cfg.adversarial {
                let res = run_attack(
                    model,
                    &x,
                    &y,
                    atk,
                    Mode::Train,
                    cfg.seed,
                    &[epoch as u64, bidx as u64],
                )?;
                x = res.adv;
                model.adversarially_trained = true;
            }

            let second = cfg.ligs_lambda > 0.0 && cfg.ligs_mode == LigsMode::DoubleBackprop;
            let tape = Tape::with_mode(if second {
                TapeMode::SecondOrder
            } else {
                TapeMode::FirstOrder
            });
            let params = model.bind(&tape);
            let xleaf = tape.leaf(x.clone());
            let fwd = model.forward(&params, &xleaf, Mode::Train)?;
            let ce = ops::softmax_cross_entropy(&fwd.logits, &y)?;

            let (total, grads) = if cfg.ligs_lambda > 0.0 {
                let shift = penalty_shift(cfg, epoch, bidx, x.shape());
                let x2 = ops::add(&xleaf, &Tensor::constant(shift.clone()))?;
                // The auxiliary forward keeps batch statistics but must
                // not touch the running averages a second time.
                let fwd2 = model.frozen_forward(&params, &x2, Mode::Train)?;
                let ce2 = ops::softmax_cross_entropy(&fwd2.logits, &y)?;
                let s1 = ops::sum_all(&ce.per_sample)?;
                match cfg.ligs_mode {
                    LigsMode::DoubleBackprop => {
                        let s2 = ops::sum_all(&ce2.per_sample)?;
                        let g1 = tape.backward(&s1)?.get(&xleaf);
                        let g2 = tape.backward(&s2)?.get(&xleaf);
                        let cos = ops::cosine_per_sample(&g1, &g2, 1e-12)?;
                        let mean_cos = ops::mean_all(&cos)?;
                        let gap = ops::sub(
                            &Tensor::constant(Buffer::full(mean_cos.shape().to_vec(), 1.0)),
                            &mean_cos,
                        )?;
                        let total =
                            ops::add(&ce.mean, &ops::scale(&gap, cfg.ligs_lambda)?)?;
                        let grads = tape.backward_through_gradient(&total)?;
                        (total, grads)
                    }
                    LigsMode::LinearitySurrogate => {
                        let g = tape.backward(&s1)?.get(&xleaf);
                        let n = x.shape()[0];
                        let per: usize = x.shape()[1..].iter().product();
                        let gd = g.data();
                        let sd = shift.data();
                        let dot: Vec<f64> = (0..n)
                            .map(|smp| {
                                let r = smp * per..(smp + 1) * per;
                                gd[r.clone()].iter().zip(&sd[r]).map(|(a, b)| a * b).sum()
                            })
                            .collect();
                        let lin = ops::sub(
                            &ops::sub(&ce2.per_sample, &ce.per_sample)?,
                            &Tensor::constant(Buffer::new(dot, vec![n])?),
                        )?;
                        let pen = ops::mean_all(&ops::abs(&lin)?)?;
                        let total =
                            ops::add(&ce.mean, &ops::scale(&pen, cfg.ligs_lambda)?)?;
                        let grads = tape.backward(&total)?;
                        (total, grads)
                    }
                }
            } else {
                let total = ce.mean.clone();
                let grads = tape.backward(&total)?;
                (total, grads)
            };

            let loss = total.data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let n = y.len();
            loss_sum += loss * n as f64;
            seen += n;

            let mut gmap = std::collections::BTreeMap::new();
            for (name, leaf) in &params {
                gmap.insert(name.clone(), grads.get(leaf).buffer().clone());
            }
            opt.step(&mut model.params, &gmap, lr, cfg.weight_decay)?;
        }

        model.epoch = epoch + 1;
        let train_loss = loss_sum / seen as f64;
        let row = if cfg.eval_epochs {
            let clean = metrics::accuracy(model, &eval_set.images, &eval_set.labels)?;
            let robust = metrics::robust_accuracy(
                model,
                &eval_set.images,
                &eval_set.labels,
                &eval_attack(),
                cfg.seed,
            )?;
            let ligs = match metrics::ligs(
                model,
                &eval_set.images,
                &eval_set.labels,
                PerturbationSpec::Gaussian(EVAL_LIGS_SIGMA),
                cfg.seed,
            ) {
                Ok(rep) => rep.value,
                Err(Error::AllGradientsZero) => f64::NAN,
                Err(e) => return Err(e),
            };
            EpochRow {
                epoch,
                train_loss,
                clean_acc: clean,
                robust_acc: robust,
                ligs,
            }
        } else {
            EpochRow {
                epoch,
                train_loss,
                clean_acc: f64::NAN,
                robust_acc: f64::NAN,
                ligs: f64::NAN,
            }
        };
        if let Some(hook) = callback.on_epoch_end.as_mut() {
            hook(model, &row)?;
        }
        report.rows.push(row);
    }
    Ok(report)
}

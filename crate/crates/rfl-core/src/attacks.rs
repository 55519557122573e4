//! Gradient attacks under l2 and linf budgets.
//!
//! One iterative engine covers the whole family: the single-step sign
//! method, projected gradient descent with either norm, the margin-loss
//! variant, and the momentum / input-diversity / kernel-smoothing
//! transfer attacks. Special cases fall out of the configuration: zero
//! momentum, zero diversity probability, and a 1x1 kernel each degrade
//! bit-for-bit to the plain iterative attack.

use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::rng::{stream_rng, stream};
use crate::tensor::{ops, Buffer, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::Kv;

/// Perturbation budget geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormBall {
    L2,
    Linf,
}

impl NormBall {
    pub fn to_text(self) -> &'static str {
        match self {
            NormBall::L2 => "l2",
            NormBall::Linf => "linf",
        }
    }

    pub fn from_text(s: &str) -> Result<NormBall> {
        match s {
            "l2" => Ok(NormBall::L2),
            "linf" => Ok(NormBall::Linf),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        }
    }
}

/// Loss the attack climbs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackLoss {
    CrossEntropy,
    /// Margin loss with confidence floor `kappa`: optimization stops once
    /// the decision is wrong (or right, when targeted) by `kappa` logits.
    CwMargin { kappa: f64 },
}

impl AttackLoss {
    fn to_text(self) -> String {
        match self {
            AttackLoss::CrossEntropy => "ce".into(),
            AttackLoss::CwMargin { kappa } => format!("cw_margin({kappa})"),
        }
    }

    fn from_text(s: &str) -> Result<AttackLoss> {
        match s {
            "ce" => Ok(AttackLoss::CrossEntropy),
            _ => {
                if let Some(inner) = s.strip_prefix("cw_margin(").and_then(|r| r.strip_suffix(')'))
                {
                    let kappa: f64 = inner
                        .parse()
                        .map_err(|_| Error::Config(format!("bad kappa in loss {s:?}")))?;
                    Ok(AttackLoss::CwMargin { kappa })
                } else {
                    Err(Error::Config(format!("unknown attack loss {s:?}")))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub norm: NormBall,
    pub eps: f64,
    pub steps: usize,
    /// Per-step size; `None` means 2.5 * eps / steps.
    pub step_size: Option<f64>,
    pub loss: AttackLoss,
    /// Start from a random point in the budget ball instead of the input.
    pub rand_init: bool,
    /// When set, labels passed to the attack are target classes and the
    /// attack pushes predictions toward them.
    pub targeted: bool,
    /// Momentum decay for accumulated gradients; 0 disables momentum.
    pub momentum_mu: f64,
    /// Probability of the resize-and-pad input transform per step.
    pub diversity_prob: f64,
    /// Side of the Gaussian kernel smoothing the gradient; must be odd,
    /// 1 disables smoothing.
    pub ti_kernel: usize,
    /// Return the best iterate seen (the clean input counts) rather than
    /// the last one.
    pub keep_best: bool,
    /// Clamp iterates to the [0, 1] image box.
    pub clip_box: bool,
}

impl Default for AttackConfig {
    fn default() -> AttackConfig {
        AttackConfig {
            norm: NormBall::L2,
            eps: 0.25,
            steps: 10,
            step_size: None,
            loss: AttackLoss::CrossEntropy,
            rand_init: false,
            targeted: false,
            momentum_mu: 0.0,
            diversity_prob: 0.0,
            ti_kernel: 1,
            keep_best: true,
            clip_box: true,
        }
    }
}

impl AttackConfig {
    /// Single sign step of size eps; returns the perturbed point itself.
    pub fn fgsm(eps: f64) -> AttackConfig {
        AttackConfig {
            norm: NormBall::Linf,
            eps,
            steps: 1,
            step_size: Some(eps),
            keep_best: false,
            ..AttackConfig::default()
        }
    }

    pub fn pgd(norm: NormBall, eps: f64, steps: usize) -> AttackConfig {
        AttackConfig { norm, eps, steps, ..AttackConfig::default() }
    }

    pub fn resolved_step_size(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None => 2.5 * self.eps / self.steps.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eps.is_finite() || self.eps < 0.0 {
            return Err(Error::InvalidConfig(format!("attack eps {} must be finite and >= 0", self.eps)));
        }
        if let Some(s) = self.step_size {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidConfig(format!("step size {s} must be finite and >= 0")));
            }
        }
        if let AttackLoss::CwMargin { kappa } = self.loss {
            if !kappa.is_finite() || kappa < 0.0 {
                return Err(Error::InvalidConfig(format!("kappa {kappa} must be finite and >= 0")));
            }
        }
        if !self.momentum_mu.is_finite() || self.momentum_mu < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must be finite and >= 0",
                self.momentum_mu
            )));
        }
        if !(0.0..=1.0).contains(&self.diversity_prob) {
            return Err(Error::InvalidConfig(format!(
                "diversity probability {} outside [0, 1]",
                self.diversity_prob
            )));
        }
        if self.ti_kernel == 0 || self.ti_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "smoothing kernel must have odd side, got {}",
                self.ti_kernel
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        kv.set("norm", self.norm.to_text());
        kv.set("eps", self.eps);
        kv.set("steps", self.steps);
        if let Some(s) = self.step_size {
            kv.set("step_size", s);
        }
        kv.set("loss", self.loss.to_text());
        kv.set("rand_init", self.rand_init);
        kv.set("targeted", self.targeted);
        kv.set("momentum_mu", self.momentum_mu);
        kv.set("diversity_prob", self.diversity_prob);
        kv.set("ti_kernel", self.ti_kernel);
        kv.set("keep_best", self.keep_best);
        kv.set("clip_box", self.clip_box);
        kv
    }

    pub fn from_kv(kv: &Kv) -> Result<AttackConfig> {
        let d = AttackConfig::default();
        let mut r = kv.reader();
        let step_size = match r.opt_str("step_size") {
            Some(raw) => Some(
                raw.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad step_size {raw:?}")))?,
            ),
            None => None,
        };
        let cfg = AttackConfig {
            norm: NormBall::from_text(&r.str_or("norm", d.norm.to_text()))?,
            eps: r.f64_or("eps", d.eps)?,
            steps: r.usize_or("steps", d.steps)?,
            step_size,
            loss: AttackLoss::from_text(&r.str_or("loss", &d.loss.to_text()))?,
            rand_init: r.bool_or("rand_init", d.rand_init)?,
            targeted: r.bool_or("targeted", d.targeted)?,
            momentum_mu: r.f64_or("momentum_mu", d.momentum_mu)?,
            diversity_prob: r.f64_or("diversity_prob", d.diversity_prob)?,
            ti_kernel: r.usize_or("ti_kernel", d.ti_kernel)?,
            keep_best: r.bool_or("keep_best", d.keep_best)?,
            clip_box: r.bool_or("clip_box", d.clip_box)?,
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Result of attacking one batch.
#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Adversarial batch, same shape as the input.
    pub adv: Buffer,
    /// Per-sample value of the configured loss at the returned iterate.
    pub loss: Vec<f64>,
    /// Whether the returned iterate fools the model (or, targeted, hits
    /// the target class).
    pub success: Vec<bool>,
    /// Achieved perturbation size in the configured norm.
    pub norm: Vec<f64>,
}

// RNG draw kinds within the attack stream.
const DRAW_INIT: u64 = 1;
const DRAW_DIVERSITY: u64 = 2;

fn ctr(tag: &[u64], kind: u64, idx: u64) -> Vec<u64> {
    let mut v = Vec::with_capacity(tag.len() + 2);
    v.extend_from_slice(tag);
    v.push(kind);
    v.push(idx);
    v
}

/// Per-sample scores from one forward pass.
struct BatchEval {
    /// Objective the attack maximizes.
    gain: Vec<f64>,
    /// Loss value to report, per the configured loss.
    report: Vec<f64>,
    pred: Vec<usize>,
    grad: Option<Buffer>,
}

/// Gain tensor: the quantity the attack maximizes, per sample.
fn gain_tensor(logits: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    match (cfg.loss, cfg.targeted) {
        (AttackLoss::CrossEntropy, false) => {
            Ok(ops::softmax_cross_entropy(logits, labels)?.per_sample)
        }
        (AttackLoss::CrossEntropy, true) => {
            ops::neg(&ops::softmax_cross_entropy(logits, labels)?.per_sample)
        }
        (AttackLoss::CwMargin { kappa }, false) => {
            // Climb the rival-over-true margin, stopping kappa past the
            // decision boundary: min(margin, kappa).
            let raw = ops::cw_margin(logits, labels, f64::INFINITY)?;
            ops::neg(&ops::maximum_with_scalar(&ops::neg(&raw)?, -kappa)?)
        }
        (AttackLoss::CwMargin { kappa }, true) => {
            // Push the rival-over-target margin below -kappa, then stop.
            ops::neg(&ops::cw_margin(logits, labels, kappa)?)
        }
    }
}

fn report_values(logits: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Vec<f64>> {
    match cfg.loss {
        AttackLoss::CrossEntropy => {
            Ok(ops::softmax_cross_entropy(logits, labels)?.per_sample.data().to_vec())
        }
        AttackLoss::CwMargin { kappa } => {
            Ok(ops::cw_margin(logits, labels, kappa)?.data().to_vec())
        }
    }
}

/// One forward pass (optionally through the diversity transform, with a
/// gradient). Runs with frozen statistics in the given mode.
fn eval_batch(
    model: &Model,
    x: &Buffer,
    labels: &[usize],
    cfg: &AttackConfig,
    mode: Mode,
    want_grad: bool,
    transform: Option<&(Buffer, Buffer)>,
) -> Result<BatchEval> {
    let params = model.bind_const();
    if want_grad {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let x_in = match transform {
            Some((mht, mwt)) => diversity_transform(&leaf, mht, mwt)?,
            None => leaf.clone(),
        };
        let fwd = model.frozen_forward(&params, &x_in, mode)?;
        let gain_t = gain_tensor(&fwd.logits, labels, cfg)?;
        let report = report_values(&fwd.logits, labels, cfg)?;
        let pred = ops::argmax_rows(fwd.logits.buffer())?;
        let scalar = ops::sum_all(&gain_t)?;
        let grads = tape.backward(&scalar)?;
        let grad = grads.get(&leaf).buffer().clone();
        Ok(BatchEval {
            gain: gain_t.data().to_vec(),
            report,
            pred,
            grad: Some(grad),
        })
    } else {
        let xc = Tensor::constant(x.clone());
        let fwd = model.frozen_forward(&params, &xc, mode)?;
        let gain_t = gain_tensor(&fwd.logits, labels, cfg)?;
        Ok(BatchEval {
            gain: gain_t.data().to_vec(),
            report: report_values(&fwd.logits, labels, cfg)?,
            pred: ops::argmax_rows(fwd.logits.buffer())?,
            grad: None,
        })
    }
}

/// Random resize-and-pad as two constant selection matrices, applied by
/// matrix multiplication along each spatial axis. The matrices are the
/// transposed combined pad-after-resize maps.
fn diversity_matrices(rng: &mut impl Rng, h: usize, w: usize) -> (Buffer, Buffer) {
    let frac: f64 = rng.gen_range(0.9..1.0);
    let hh = ((h as f64 * frac).round() as usize).clamp(1, h);
    let ww = ((w as f64 * frac).round() as usize).clamp(1, w);
    let oy = rng.gen_range(0..=(h - hh)) as usize;
    let ox = rng.gen_range(0..=(w - ww)) as usize;
    let mut mht = vec![0.0; h * h];
    for j in 0..hh {
        let src = j * h / hh;
        mht[src * h + (oy + j)] = 1.0;
    }
    let mut mwt = vec![0.0; w * w];
    for j in 0..ww {
        let src = j * w / ww;
        mwt[src * w + (ox + j)] = 1.0;
    }
    (
        Buffer::new(mht, vec![h, h]).unwrap(),
        Buffer::new(mwt, vec![w, w]).unwrap(),
    )
}

/// Applies the height/width selection matrices to `[N, C, H, W]` through
/// reshape/transpose/matmul, keeping the whole map differentiable.
fn diversity_transform(x: &Tensor, mht: &Buffer, mwt: &Buffer) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mwt = Tensor::constant(mwt.clone());
    let mht = Tensor::constant(mht.clone());
    let a = ops::reshape(x, &[n * c * h, w])?;
    let b = ops::matmul(&a, &mwt)?; // rows (n, c, h), cols w'
    let c2 = ops::transpose2(&b)?; // rows w', cols (n, c, h)
    let d = ops::reshape(&c2, &[w * n * c, h])?;
    let e = ops::matmul(&d, &mht)?; // rows (w', n, c), cols h'
    let f = ops::transpose2(&e)?; // rows h', cols (w', n, c)
    let g = ops::reshape(&f, &[h * w, n * c])?;
    let t = ops::transpose2(&g)?; // rows (n, c), cols (h', w')
    ops::reshape(&t, &[n, c, h, w])
}

/// Depthwise Gaussian smoothing of a gradient batch, same padding.
fn smooth_gradient(g: &Buffer, k: usize) -> Buffer {
    if k == 1 {
        return g.clone();
    }
    let sigma = k as f64 / 6.0;
    let half = (k / 2) as isize;
    let mut kernel = vec![0.0; k * k];
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let di = i as isize - half;
            let dj = j as isize - half;
            let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[i * k + j] = v;
            total += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= total;
    }
    let s = g.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let gd = g.data();
    let mut out = vec![0.0; gd.len()];
    for img in 0..n * c {
        let base = img * h * w;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for ki in 0..k {
                    for kj in 0..k {
                        let sy = y + ki as isize - half;
                        let sx = x + kj as isize - half;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += kernel[ki * k + kj]
                                * gd[base + sy as usize * w + sx as usize];
                        }
                    }
                }
                out[base + y as usize * w + x as usize] = acc;
            }
        }
    }
    Buffer::new(out, s.to_vec()).unwrap()
}

/// Projects each sample back into the budget ball around its origin.
fn project_ball(cur: &mut [f64], origin: &[f64], cfg: &AttackConfig, n: usize, d: usize) {
    match cfg.norm {
        NormBall::Linf => {
            for i in 0..n * d {
                let lo = origin[i] - cfg.eps;
                let hi = origin[i] + cfg.eps;
                cur[i] = cur[i].clamp(lo, hi);
            }
        }
        NormBall::L2 => {
            for s in 0..n {
                let r = s * d..(s + 1) * d;
                let mut sq = 0.0;
                for i in r.clone() {
                    let diff = cur[i] - origin[i];
                    sq += diff * diff;
                }
                let norm = sq.sqrt();
                if norm > cfg.eps && norm > 0.0 {
                    let scale = cfg.eps / norm;
                    for i in r {
                        cur[i] = origin[i] + (cur[i] - origin[i]) * scale;
                    }
                }
            }
        }
    }
}

fn clamp01(cur: &mut [f64]) {
    for v in cur.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ascent step from the (possibly momentum-accumulated) gradient.
fn ascend(cur: &mut [f64], grad: &[f64], acc: &mut [f64], cfg: &AttackConfig, alpha: f64, n: usize, d: usize) {
    let dir: &[f64] = if cfg.momentum_mu > 0.0 {
        for s in 0..n {
            let r = s * d..(s + 1) * d;
            let l1: f64 = grad[r.clone()].iter().map(|v| v.abs()).sum();
            for i in r {
                let unit = if l1 > 0.0 { grad[i] / l1 } else { 0.0 };
                acc[i] = cfg.momentum_mu * acc[i] + unit;
            }
        }
        acc
    } else {
        grad
    };
    match cfg.norm {
        NormBall::Linf => {
            for i in 0..n * d {
                cur[i] += alpha * sign(dir[i]);
            }
        }
        NormBall::L2 => {
            for s in 0..n {
                let r = s * d..(s + 1) * d;
                let mut sq = 0.0;
                for i in r.clone() {
                    sq += dir[i] * dir[i];
                }
                let norm = sq.sqrt();
                if norm > 0.0 {
                    for i in r {
                        cur[i] += alpha * dir[i] / norm;
                    }
                }
            }
        }
    }
}

/// Best-iterate tracker; with `keep_best` off it just keeps the latest.
struct BestTracker {
    keep_best: bool,
    gain: Vec<f64>,
    report: Vec<f64>,
    pred: Vec<usize>,
    rows: Vec<f64>,
    d: usize,
}

impl BestTracker {
    fn new(n: usize, d: usize, keep_best: bool) -> BestTracker {
        BestTracker {
            keep_best,
            gain: vec![f64::NEG_INFINITY; n],
            report: vec![0.0; n],
            pred: vec![0; n],
            rows: vec![0.0; n * d],
            d,
        }
    }

    fn consider(&mut self, x: &[f64], eval: &BatchEval) {
        for s in 0..self.gain.len() {
            if !self.keep_best || eval.gain[s] > self.gain[s] {
                self.gain[s] = eval.gain[s];
                self.report[s] = eval.report[s];
                self.pred[s] = eval.pred[s];
                let r = s * self.d..(s + 1) * self.d;
                self.rows[r.clone()].copy_from_slice(&x[r]);
            }
        }
    }
}

/// Runs the configured attack on one batch. `labels` are true labels, or
/// target classes when the config is targeted. `mode` picks the
/// normalization statistics (train mode inside a training loop); running
/// statistics are never updated. `tag` prefixes the RNG counters so
/// distinct call sites draw independent randomness under one seed.
pub fn run_attack(
    model: &Model,
    x0: &Buffer,
    labels: &[usize],
    cfg: &AttackConfig,
    mode: Mode,
    seed: u64,
    tag: &[u64],
) -> Result<AttackResult> {
    cfg.validate()?;
    let s = x0.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "run_attack",
            detail: format!("expected [N, C, H, W], got {s:?}"),
        });
    }
    let n = s[0];
    let d: usize = s[1..].iter().product();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "run_attack",
            detail: format!("{n} samples with {} labels", labels.len()),
        });
    }
    let classes = model.config.classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} outside {classes} classes"
        )));
    }

    let finish = |rows: Vec<f64>, report: Vec<f64>, pred: Vec<usize>| -> Result<AttackResult> {
        let x0d = x0.data();
        let mut norms = Vec::with_capacity(n);
        for smp in 0..n {
            let r = smp * d..(smp + 1) * d;
            let nv = match cfg.norm {
                NormBall::L2 => rows[r.clone()]
                    .iter()
                    .zip(&x0d[r.clone()])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                NormBall::Linf => rows[r.clone()]
                    .iter()
                    .zip(&x0d[r.clone()])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            };
            debug_assert!(nv <= cfg.eps + 1e-9, "norm {nv} over budget {}", cfg.eps);
            norms.push(nv);
        }
        let success = pred
            .iter()
            .zip(labels)
            .map(|(&p, &y)| if cfg.targeted { p == y } else { p != y })
            .collect();
        Ok(AttackResult {
            adv: Buffer::new(rows, s.clone())?,
            loss: report,
            success,
            norm: norms,
        })
    };

    if cfg.eps == 0.0 || cfg.steps == 0 {
        let eval = eval_batch(model, x0, labels, cfg, mode, false, None)?;
        return finish(x0.data().to_vec(), eval.report, eval.pred);
    }

    let mut best = BestTracker::new(n, d, cfg.keep_best);
    let mut cur = x0.data().to_vec();
    if cfg.rand_init {
        // The clean input stays a candidate even when the walk starts
        // elsewhere.
        let eval = eval_batch(model, x0, labels, cfg, mode, false, None)?;
        best.consider(x0.data(), &eval);
        for smp in 0..n {
            let mut rng = stream_rng(seed, stream::ATTACK, &ctr(tag, DRAW_INIT, smp as u64));
            match cfg.norm {
                NormBall::Linf => {
                    for i in smp * d..(smp + 1) * d {
                        cur[i] += rng.gen_range(-cfg.eps..=cfg.eps);
                    }
                }
                NormBall::L2 => {
                    let mut z: Vec<f64> = vec![0.0; d];
                    let mut sq = 0.0f64;
                    for v in z.iter_mut() {
                        *v = rng.sample(StandardNormal);
                        sq += *v * *v;
                    }
                    let znorm = sq.sqrt();
                    if znorm > 0.0 {
                        let u: f64 = rng.gen();
                        let radius = cfg.eps * u.powf(1.0 / d as f64);
                        for (i, v) in z.iter().enumerate() {
                            cur[smp * d + i] += radius * v / znorm;
                        }
                    }
                }
            }
        }
        project_ball(&mut cur, x0.data(), cfg, n, d);
        if cfg.clip_box {
            clamp01(&mut cur);
        }
    }

    let alpha = cfg.resolved_step_size();
    let mut acc = vec![0.0; n * d];
    for step in 0..cfg.steps {
        let cur_buf = Buffer::new(cur.clone(), s.clone())?;
        let transform = if cfg.diversity_prob > 0.0 {
            let mut rng =
                stream_rng(seed, stream::ATTACK, &ctr(tag, DRAW_DIVERSITY, step as u64));
            if rng.gen_bool(cfg.diversity_prob) {
                let (mht, mwt) = diversity_matrices(&mut rng, s[2], s[3]);
                Some((mht, mwt))
            } else {
                None
            }
        } else {
            None
        };
        let grad_eval = eval_batch(model, &cur_buf, labels, cfg, mode, true, transform.as_ref())?;
        if transform.is_some() {
            // Scores under the transform describe the transformed input;
            // judge the candidate itself separately.
            let plain = eval_batch(model, &cur_buf, labels, cfg, mode, false, None)?;
            best.consider(&cur, &plain);
        } else {
            best.consider(&cur, &grad_eval);
        }
        let mut grad = grad_eval.grad.expect("gradient requested");
        if cfg.ti_kernel > 1 {
            grad = smooth_gradient(&grad, cfg.ti_kernel);
        }
        ascend(&mut cur, grad.data(), &mut acc, cfg, alpha, n, d);
        project_ball(&mut cur, x0.data(), cfg, n, d);
        if cfg.clip_box {
            clamp01(&mut cur);
        }
    }
    let final_buf = Buffer::new(cur.clone(), s.clone())?;
    let final_eval = eval_batch(model, &final_buf, labels, cfg, mode, false, None)?;
    best.consider(&cur, &final_eval);
    finish(best.rows, best.report, best.pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_projection_rescales_radially() {
        let cfg = AttackConfig { norm: NormBall::L2, eps: 1.0, ..AttackConfig::default() };
        let mut cur = vec![3.0, 4.0];
        project_ball(&mut cur, &[0.0, 0.0], &cfg, 1, 2);
        assert!((cur[0] - 0.6).abs() < 1e-12);
        assert!((cur[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn linf_projection_clamps_each_coordinate() {
        let cfg = AttackConfig { norm: NormBall::Linf, eps: 0.5, ..AttackConfig::default() };
        let mut cur = vec![3.0, -0.2, 0.1];
        project_ball(&mut cur, &[0.0, 0.0, 0.0], &cfg, 1, 3);
        assert_eq!(cur, vec![0.5, -0.2, 0.1]);
    }

    #[test]
    fn default_step_size_is_a_quarter_again_over_the_budget() {
        let cfg = AttackConfig { eps: 0.25, steps: 20, ..AttackConfig::default() };
        assert!((cfg.resolved_step_size() - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn even_smoothing_kernels_are_rejected() {
        let cfg = AttackConfig { ti_kernel: 4, ..AttackConfig::default() };
        match cfg.validate() {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("odd"), "{msg}"),
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = AttackConfig {
            norm: NormBall::Linf,
            eps: 0.03,
            steps: 17,
            step_size: Some(0.004),
            loss: AttackLoss::CwMargin { kappa: 1.5 },
            rand_init: true,
            targeted: true,
            momentum_mu: 1.0,
            diversity_prob: 0.5,
            ti_kernel: 7,
            keep_best: false,
            clip_box: false,
        };
        let back = AttackConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, back);
        let plain = AttackConfig::default();
        assert_eq!(AttackConfig::from_kv(&plain.to_kv()).unwrap(), plain);
    }

    #[test]
    fn sign_of_zero_is_zero_so_dead_coordinates_stay_put() {
        let cfg = AttackConfig { norm: NormBall::Linf, eps: 1.0, ..AttackConfig::default() };
        let mut cur = vec![0.5, 0.5];
        let mut acc = vec![0.0; 2];
        ascend(&mut cur, &[0.0, -2.0], &mut acc, &cfg, 0.1, 1, 2);
        assert_eq!(cur[0], 0.5);
        assert!((cur[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unit_smoothing_kernel_is_the_identity() {
        let g = Buffer::from_fn(vec![1, 1, 3, 3], |i| (i as f64).sin());
        let out = smooth_gradient(&g, 1);
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn smoothing_kernel_preserves_interior_mass_direction() {
        // A centered spike spreads symmetrically and keeps its sign.
        let mut data = vec![0.0; 49];
        data[24] = 1.0;
        let g = Buffer::new(data, vec![1, 1, 7, 7]).unwrap();
        let out = smooth_gradient(&g, 7);
        let total: f64 = out.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "mass {total}");
        assert!(out.data().iter().all(|&v| v >= 0.0));
        assert!(out.data()[24] > out.data()[0]);
    }

    #[test]
    fn diversity_matrices_are_selection_maps() {
        let mut rng = stream_rng(1, stream::ATTACK, &[0]);
        for _ in 0..20 {
            let (mht, mwt) = diversity_matrices(&mut rng, 8, 8);
            for m in [&mht, &mwt] {
                // Each content column carries exactly one 1; the map never
                // amplifies.
                for v in m.data() {
                    assert!(*v == 0.0 || *v == 1.0);
                }
                let total: f64 = m.data().iter().sum();
                assert!(total >= 1.0 && total <= 8.0);
            }
        }
    }
}

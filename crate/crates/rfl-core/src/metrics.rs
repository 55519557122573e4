//! Evaluation metrics: local input-gradient similarity, clean and robust
//! accuracy, and a five-kind corruption suite at five severities.

use crate::attacks::{run_attack, AttackConfig, NormBall};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::rng::{stream_rng, stream};
use crate::tensor::{ops, Buffer, Tape};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// How the comparison point `x + nu` is produced for the gradient
/// similarity metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbationSpec {
    /// `nu = sigma * z`, `z` standard normal per sample.
    Gaussian(f64),
    /// `nu = a * z`, `z` uniform on [-1, 1] per coordinate.
    Uniform(f64),
    /// Single sign step of the given size.
    Fgsm(f64),
    /// Iterative sign attack inside an linf ball.
    Pgd { eps: f64, steps: usize },
}

impl Default for PerturbationSpec {
    fn default() -> PerturbationSpec {
        PerturbationSpec::Gaussian(0.01)
    }
}

impl PerturbationSpec {
    pub fn to_text(self) -> String {
        match self {
            PerturbationSpec::Gaussian(s) => format!("gaussian({s})"),
            PerturbationSpec::Uniform(a) => format!("uniform({a})"),
            PerturbationSpec::Fgsm(e) => format!("fgsm({e})"),
            PerturbationSpec::Pgd { eps, steps } => format!("pgd({eps},{steps})"),
        }
    }

    pub fn from_text(s: &str) -> Result<PerturbationSpec> {
        let inner = |prefix: &str| -> Option<&str> {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
        };
        let num = |raw: &str| -> Result<f64> {
            raw.parse()
                .map_err(|_| Error::Config(format!("bad number {raw:?} in perturbation {s:?}")))
        };
        if let Some(raw) = inner("gaussian") {
            return Ok(PerturbationSpec::Gaussian(num(raw)?));
        }
        if let Some(raw) = inner("uniform") {
            return Ok(PerturbationSpec::Uniform(num(raw)?));
        }
        if let Some(raw) = inner("fgsm") {
            return Ok(PerturbationSpec::Fgsm(num(raw)?));
        }
        if let Some(raw) = inner("pgd") {
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!("pgd spec {s:?} is not pgd(eps,steps)")));
            }
            let steps = parts[1]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad step count in {s:?}")))?;
            return Ok(PerturbationSpec::Pgd { eps: num(parts[0].trim())?, steps });
        }
        Err(Error::Config(format!("unknown perturbation {s:?}")))
    }
}

/// Outcome of the gradient-similarity metric.
#[derive(Clone, Copy, Debug)]
pub struct LigsReport {
    /// Mean cosine over the samples that kept a nonzero gradient on both
    /// sides, clamped into [-1, 1].
    pub value: f64,
    pub used: usize,
    /// Samples dropped because either gradient vanished.
    pub excluded: usize,
}

/// Input gradient of the mean cross-entropy for each sample, `[N, D]`.
fn input_gradients(model: &Model, images: &Buffer, labels: &[usize]) -> Result<Buffer> {
    let tape = Tape::new();
    let leaf = tape.leaf(images.clone());
    let fwd = model.eval_forward(&model.bind_const(), &leaf)?;
    let ce = ops::softmax_cross_entropy(&fwd.logits, labels)?;
    let total = ops::sum_all(&ce.per_sample)?;
    let grads = tape.backward(&total)?;
    let g = grads.get(&leaf).buffer().clone();
    let n = images.shape()[0];
    let d: usize = images.shape()[1..].iter().product();
    g.reshaped(vec![n, d])
}

/// The random direction for sample `index` under `seed`, independent of
/// the magnitude so that shrinking sigma walks the same ray.
fn ligs_direction(spec: PerturbationSpec, seed: u64, index: u64, d: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream::LIGS, &[index]);
    match spec {
        PerturbationSpec::Gaussian(_) => {
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        }
        PerturbationSpec::Uniform(_) => (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        _ => unreachable!("attack perturbations are not drawn"),
    }
}

/// Local input-gradient similarity: mean cosine between the loss
/// gradient at each sample and at a perturbed copy. Evaluation mode,
/// one perturbation per sample.
pub fn ligs(
    model: &Model,
    images: &Buffer,
    labels: &[usize],
    spec: PerturbationSpec,
    seed: u64,
) -> Result<LigsReport> {
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "ligs",
            detail: format!("{n} images with {} labels", labels.len()),
        });
    }
    let d: usize = images.shape()[1..].iter().product();
    let shifted: Buffer = match spec {
        PerturbationSpec::Gaussian(mag) | PerturbationSpec::Uniform(mag) => {
            let base = images.data();
            let mut out = vec![0.0; n * d];
            for smp in 0..n {
                let z = ligs_direction(spec, seed, smp as u64, d);
                for i in 0..d {
                    out[smp * d + i] = base[smp * d + i] + mag * z[i];
                }
            }
            Buffer::new(out, images.shape().to_vec())?
        }
        PerturbationSpec::Fgsm(eps) => {
            let cfg = AttackConfig { clip_box: false, ..AttackConfig::fgsm(eps) };
            run_attack(model, images, labels, &cfg, Mode::Eval, seed, &[stream::LIGS])?.adv
        }
        PerturbationSpec::Pgd { eps, steps } => {
            let cfg = AttackConfig {
                norm: NormBall::Linf,
                eps,
                steps,
                keep_best: false,
                clip_box: false,
                ..AttackConfig::default()
            };
            run_attack(model, images, labels, &cfg, Mode::Eval, seed, &[stream::LIGS])?.adv
        }
    };
    let g0 = input_gradients(model, images, labels)?;
    let g1 = input_gradients(model, &shifted, labels)?;
    let (a, b) = (g0.data(), g1.data());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for smp in 0..n {
        let r = smp * d..(smp + 1) * d;
        let na: f64 = a[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            excluded += 1;
            continue;
        }
        let dot: f64 = a[r.clone()].iter().zip(&b[r]).map(|(x, y)| x * y).sum();
        total += (dot / (na * nb)).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::AllGradientsZero);
    }
    Ok(LigsReport {
        value: (total / used as f64).clamp(-1.0, 1.0),
        used,
        excluded,
    })
}

/// Fraction of samples whose top logit matches the label; ties resolve
/// to the lowest class index.
pub fn accuracy(model: &Model, images: &Buffer, labels: &[usize]) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Data("accuracy over an empty batch".into()));
    }
    let mut correct = 0usize;
    let chunk = 256;
    let d: usize = images.shape()[1..].iter().product();
    let data = images.data();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let part = Buffer::new(data[start * d..end * d].to_vec(), shape)?;
        let fwd = model.eval_forward(
            &model.bind_const(),
            &crate::tensor::Tensor::constant(part),
        )?;
        let pred = ops::argmax_rows(fwd.logits.buffer())?;
        correct += pred
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy on adversarial copies of the batch.
pub fn robust_accuracy(
    model: &Model,
    images: &Buffer,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Data("robust accuracy over an empty batch".into()));
    }
    let chunk = 128;
    let d: usize = images.shape()[1..].iter().product();
    let data = images.data();
    let mut fooled = 0usize;
    let mut start = 0;
    let mut batch_idx = 0u64;
    while start < n {
        let end = (start + chunk).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let part = Buffer::new(data[start * d..end * d].to_vec(), shape)?;
        let res = run_attack(
            model,
            &part,
            &labels[start..end],
            cfg,
            Mode::Eval,
            seed,
            &[stream::EVAL, batch_idx],
        )?;
        fooled += res.success.iter().filter(|s| **s).count();
        start = end;
        batch_idx += 1;
    }
    Ok(1.0 - fooled as f64 / n as f64)
}

// ── Corruptions ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Speckle,
    Contrast,
    Fog,
}

pub const CORRUPTION_KINDS: [CorruptionKind; 5] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::Speckle,
    CorruptionKind::Contrast,
    CorruptionKind::Fog,
];

pub const SEVERITIES: usize = 5;

/// Additive and multiplicative noise scales per severity.
const NOISE_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
/// Photon budget per severity; fewer photons mean louder shot noise.
const SHOT_LAMBDA: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
/// Contrast retention per severity.
const CONTRAST_C: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
/// Haze mix-in weight per severity.
const FOG_T: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.55];

impl CorruptionKind {
    pub fn to_text(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Speckle => "speckle",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Fog => "fog",
        }
    }

    pub fn from_text(s: &str) -> Result<CorruptionKind> {
        CORRUPTION_KINDS
            .into_iter()
            .find(|k| k.to_text() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption {s:?}")))
    }

    fn id(self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 1,
            CorruptionKind::ShotNoise => 2,
            CorruptionKind::Speckle => 3,
            CorruptionKind::Contrast => 4,
            CorruptionKind::Fog => 5,
        }
    }
}

/// Bilinear upsample of a `fh x fw` field to `h x w`.
fn upsample_bilinear(field: &[f64], fh: usize, fw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = if h > 1 { y as f64 * (fh - 1) as f64 / (h - 1) as f64 } else { 0.0 };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(fh - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = if w > 1 { x as f64 * (fw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(fw - 1);
            let tx = fx - x0 as f64;
            let a = field[y0 * fw + x0] * (1.0 - tx) + field[y0 * fw + x1] * tx;
            let b = field[y1 * fw + x0] * (1.0 - tx) + field[y1 * fw + x1] * tx;
            out[y * w + x] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

/// Applies one corruption at `severity` (1..=5). Randomness is drawn per
/// sample from the global index `base_index + i`, so corrupting a split
/// batch by batch equals corrupting it whole.
pub fn corrupt(
    images: &Buffer,
    kind: CorruptionKind,
    severity: usize,
    seed: u64,
    base_index: u64,
) -> Result<Buffer> {
    if !(1..=SEVERITIES).contains(&severity) {
        return Err(Error::InvalidConfig(format!(
            "severity {severity} outside 1..={SEVERITIES}"
        )));
    }
    let s = images.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "corrupt",
            detail: format!("expected [N, C, H, W], got {s:?}"),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = c * h * w;
    let lvl = severity - 1;
    let src = images.data();
    let mut out = vec![0.0; n * d];
    for smp in 0..n {
        let mut rng = stream_rng(
            seed,
            stream::CORRUPT,
            &[kind.id(), severity as u64, base_index + smp as u64],
        );
        let x = &src[smp * d..(smp + 1) * d];
        let y = &mut out[smp * d..(smp + 1) * d];
        match kind {
            CorruptionKind::GaussianNoise => {
                let sigma = NOISE_SIGMA[lvl];
                for i in 0..d {
                    y[i] = x[i] + sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            CorruptionKind::ShotNoise => {
                let lambda = SHOT_LAMBDA[lvl];
                for i in 0..d {
                    let rate = x[i] * lambda;
                    y[i] = if rate > 0.0 {
                        let pois = Poisson::new(rate).map_err(|e| {
                            Error::Data(format!("shot noise rate {rate}: {e}"))
                        })?;
                        pois.sample(&mut rng) / lambda
                    } else {
                        0.0
                    };
                }
            }
            CorruptionKind::Speckle => {
                let sigma = NOISE_SIGMA[lvl];
                for i in 0..d {
                    y[i] = x[i] * (1.0 + sigma * rng.sample::<f64, _>(StandardNormal));
                }
            }
            CorruptionKind::Contrast => {
                let keep = CONTRAST_C[lvl];
                for ch in 0..c {
                    let plane = &x[ch * h * w..(ch + 1) * h * w];
                    let mean: f64 = plane.iter().sum::<f64>() / plane.len() as f64;
                    for (i, &v) in plane.iter().enumerate() {
                        y[ch * h * w + i] = mean + keep * (v - mean);
                    }
                }
            }
            CorruptionKind::Fog => {
                let t = FOG_T[lvl];
                // One shared haze field across channels of the sample.
                let field: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
                let haze = upsample_bilinear(&field, 4, 4, h, w);
                for ch in 0..c {
                    for p in 0..h * w {
                        y[ch * h * w + p] = (1.0 - t) * x[ch * h * w + p] + t * haze[p];
                    }
                }
            }
        }
        for v in y.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Buffer::new(out, s)
}

/// Accuracy under every corruption kind and severity.
pub fn corruption_suite(
    model: &Model,
    images: &Buffer,
    labels: &[usize],
    seed: u64,
) -> Result<Vec<(CorruptionKind, [f64; SEVERITIES])>> {
    let mut table = Vec::with_capacity(CORRUPTION_KINDS.len());
    for kind in CORRUPTION_KINDS {
        let mut row = [0.0; SEVERITIES];
        for severity in 1..=SEVERITIES {
            let corrupted = corrupt(images, kind, severity, seed, 0)?;
            row[severity - 1] = accuracy(model, &corrupted, labels)?;
        }
        table.push((kind, row));
    }
    Ok(table)
}

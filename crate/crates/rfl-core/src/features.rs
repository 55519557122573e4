//! Dataset surgery: distill what a model's penultimate layer considers
//! class-defining into new training sets, or relabel images by attacking
//! them toward chosen classes. Evaluating models trained on these sets
//! separates the signal families a classifier can lean on.

use crate::attacks::{run_attack, AttackConfig, NormBall};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::rng::{stream, stream_rng};
use crate::tensor::{ops, Buffer, Tape, Tensor};
use rand::Rng;

/// Gradient matching of penultimate features.
#[derive(Clone, Copy, Debug)]
pub struct DistillConfig {
    /// Descent iterations per chunk of samples.
    pub iters: usize,
    /// Plain gradient step on the squared feature distance.
    pub step: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig { iters: 1000, step: 0.1, seed: 0 }
    }
}

/// Attack budget for the relabeling constructions. Half a unit of l2
/// reliably crosses class boundaries on the synthetic corpus while
/// leaving the loud structure intact.
pub const RELABEL_EPS: f64 = 0.5;
pub const RELABEL_STEPS: usize = 50;

fn relabel_attack() -> AttackConfig {
    AttackConfig {
        norm: NormBall::L2,
        eps: RELABEL_EPS,
        steps: RELABEL_STEPS,
        targeted: true,
        ..AttackConfig::default()
    }
}

/// Penultimate features of `x`, detached, `[N, F]`.
fn features_of(model: &Model, x: &Buffer) -> Result<Buffer> {
    let fwd = model.eval_forward(&model.bind_const(), &Tensor::constant(x.clone()))?;
    Ok(fwd.penultimate.buffer().clone())
}

/// For each sample, the index of a different-class source image.
fn pick_sources(ds: &Dataset, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let others: Vec<usize> =
            (0..ds.len()).filter(|&j| ds.labels[j] != ds.labels[i]).collect();
        if others.is_empty() {
            return Err(Error::Data("every sample shares one class".into()));
        }
        let mut rng = stream_rng(seed, stream::EXTRACT, &[i as u64]);
        out.push(others[rng.gen_range(0..others.len())]);
    }
    Ok(out)
}

/// Rebuilds each training image from a different-class starting point by
/// matching its penultimate features, and keeps the target's label. What
/// survives the rebuild is whatever the model's features encode: a
/// standard model leaks its brittle cues, an adversarially trained model
/// only its robust ones. The dataset name records which.
pub fn feature_match(model: &Model, ds: &Dataset, cfg: &DistillConfig) -> Result<Dataset> {
    if cfg.iters == 0 || !(cfg.step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "distillation needs iters > 0 and step > 0, got {} and {}",
            cfg.iters, cfg.step
        )));
    }
    let n = ds.len();
    if n == 0 {
        return Err(Error::Data("cannot distill an empty dataset".into()));
    }
    let sources = pick_sources(ds, cfg.seed)?;
    let d: usize = ds.images.shape()[1..].iter().product();
    let mut out = vec![0.0; n * d];

    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let m = end - start;
        let mut shape = ds.images.shape().to_vec();
        shape[0] = m;

        let idx: Vec<usize> = (start..end).collect();
        let target_feats = {
            let targets = ds.subset(&idx)?;
            features_of(model, &targets.images)?
        };
        let mut cur = Vec::with_capacity(m * d);
        for &i in &idx {
            cur.extend_from_slice(ds.images.sample(sources[i]));
        }
        let mut best = vec![f64::INFINITY; m];
        let mut kept = cur.clone();
        let params = model.bind_const();
        let feat_const = Tensor::constant(target_feats);

        for _ in 0..cfg.iters {
            let tape = Tape::new();
            let z = tape.leaf(Buffer::new(cur.clone(), shape.clone())?);
            let fwd = model.eval_forward(&params, &z)?;
            let gap = ops::sub(&fwd.penultimate, &feat_const)?;
            let sq = ops::mul(&gap, &gap)?;
            let per = ops::reshape(&ops::sum_axes(&sq, &[1])?, &[m])?;
            let total = ops::sum_all(&per)?;
            let grads = tape.backward(&total)?;
            let g = grads.get(&z);
            let gd = g.buffer().data();

            for (smp, dist) in per.data().iter().enumerate() {
                if *dist < best[smp] {
                    best[smp] = *dist;
                    kept[smp * d..(smp + 1) * d].copy_from_slice(&cur[smp * d..(smp + 1) * d]);
                }
            }
            for (v, gv) in cur.iter_mut().zip(gd) {
                *v = (*v - cfg.step * gv).clamp(0.0, 1.0);
            }
        }
        // Score the final iterate too: the loop above judges pre-step states.
        let final_feats = features_of(model, &Buffer::new(cur.clone(), shape.clone())?)?;
        let fin = final_feats.data();
        let tgt = {
            let targets = ds.subset(&idx)?;
            features_of(model, &targets.images)?
        };
        let f = tgt.shape()[1];
        for smp in 0..m {
            let dist: f64 = (0..f)
                .map(|k| {
                    let delta = fin[smp * f + k] - tgt.data()[smp * f + k];
                    delta * delta
                })
                .sum();
            if dist < best[smp] {
                kept[smp * d..(smp + 1) * d].copy_from_slice(&cur[smp * d..(smp + 1) * d]);
            }
        }
        out[start * d..end * d].copy_from_slice(&kept);
        start = end;
    }

    let name = if model.adversarially_trained { "dr" } else { "dnr" };
    Dataset::new(
        Buffer::new(out, ds.images.shape().to_vec())?,
        ds.labels.clone(),
        ds.n_classes,
        name,
    )
}

/// How relabeling picks each sample's destination class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelabelTargets {
    /// Uniform over the other classes.
    Random,
    /// The next class round-robin: (y + 1) mod C.
    NextClass,
}

/// Attacks every image toward a chosen other class and labels it with
/// that class. The image still looks like its origin; only brittle cues
/// vote for the new label, so training on the result reveals how much a
/// model can learn from those cues alone.
pub fn relabel(
    model: &Model,
    ds: &Dataset,
    targets: RelabelTargets,
    seed: u64,
) -> Result<Dataset> {
    if ds.n_classes < 2 {
        return Err(Error::Data("relabeling needs at least two classes".into()));
    }
    let picked: Vec<usize> = ds
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| match targets {
            RelabelTargets::NextClass => (y + 1) % ds.n_classes,
            RelabelTargets::Random => {
                let mut rng = stream_rng(seed, stream::EXTRACT, &[1, i as u64]);
                let hop = rng.gen_range(1..ds.n_classes);
                (y + hop) % ds.n_classes
            }
        })
        .collect();

    let cfg = relabel_attack();
    let d: usize = ds.images.shape()[1..].iter().product();
    let mut out = vec![0.0; ds.len() * d];
    let chunk = 128;
    let mut start = 0;
    let mut batch_idx = 0u64;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let idx: Vec<usize> = (start..end).collect();
        let part = ds.subset(&idx)?;
        let res = run_attack(
            model,
            &part.images,
            &picked[start..end],
            &cfg,
            Mode::Eval,
            seed,
            &[2, batch_idx],
        )?;
        out[start * d..end * d].copy_from_slice(res.adv.data());
        start = end;
        batch_idx += 1;
    }

    let name = match targets {
        RelabelTargets::Random => "drand",
        RelabelTargets::NextClass => "ddet",
    };
    Dataset::new(
        Buffer::new(out, ds.images.shape().to_vec())?,
        picked,
        ds.n_classes,
        name,
    )
}

/// From a robust-feature set, plant each image's brittle cues one class
/// ahead: sample (x, u) is attacked toward (u + 1) mod C with `planter`
/// and labeled with that class. The result carries robust features of
/// class (label - 1) and brittle features of the label itself.
pub fn conflict_set(planter: &Model, dr: &Dataset, seed: u64) -> Result<Dataset> {
    let shifted = relabel(planter, dr, RelabelTargets::NextClass, seed)?;
    Dataset::new(
        shifted.images,
        shifted.labels,
        shifted.n_classes,
        "dconflict",
    )
}

/// How a model votes on conflict samples.
#[derive(Clone, Copy, Debug)]
pub struct ConflictReport {
    /// Fraction predicting the planted (brittle) class, the stored label.
    pub nrf_rate: f64,
    /// Fraction predicting the robust class, one behind the label.
    pub rf_rate: f64,
    /// Fraction predicting anything else.
    pub other_rate: f64,
    pub n: usize,
}

pub fn conflict_eval(model: &Model, conflict: &Dataset) -> Result<ConflictReport> {
    if conflict.is_empty() {
        return Err(Error::Data("conflict set is empty".into()));
    }
    let fwd = model.eval_forward(
        &model.bind_const(),
        &Tensor::constant(conflict.images.clone()),
    )?;
    let preds = ops::argmax_rows(fwd.logits.buffer())?;
    let c = conflict.n_classes;
    let mut nrf = 0usize;
    let mut rf = 0usize;
    for (p, &y) in preds.iter().zip(&conflict.labels) {
        if *p == y {
            nrf += 1;
        } else if *p == (y + c - 1) % c {
            rf += 1;
        }
    }
    let n = conflict.len();
    Ok(ConflictReport {
        nrf_rate: nrf as f64 / n as f64,
        rf_rate: rf as f64 / n as f64,
        other_rate: (n - nrf - rf) as f64 / n as f64,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::nn::{train, ModelConfig, TrainCallback, TrainConfig};

    fn corpus() -> crate::data::SyntheticData {
        generate(&SyntheticSpec {
            test_per_class: 64,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn trained_model(seed: u64) -> (Model, crate::data::SyntheticData) {
        let data = corpus();
        let mut m = Model::build(
            &ModelConfig {
                arch: crate::nn::Arch::Mlp,
                depth: 2,
                width: 32,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 128,
            lr: 0.05,
            lr_decay_epochs: vec![100],
            // Decay fights the large weights the faint code needs, so the
            // teacher trains without it.
            weight_decay: 0.0,
            eval_epochs: false,
            seed,
            ..TrainConfig::default()
        };
        train(&mut m, &data.train, &data.test, &cfg, &mut TrainCallback::default()).unwrap();
        let acc = crate::metrics::accuracy(&m, &data.test.images, &data.test.labels).unwrap();
        assert!(acc > 0.9, "teacher only reached {acc} test accuracy");
        (m, data)
    }

    #[test]
    fn source_picks_avoid_the_target_class_and_are_deterministic() {
        let data = corpus();
        let a = pick_sources(&data.train, 5).unwrap();
        let b = pick_sources(&data.train, 5).unwrap();
        assert_eq!(a, b);
        for (i, &j) in a.iter().enumerate() {
            assert_ne!(data.train.labels[i], data.train.labels[j]);
        }
    }

    #[test]
    fn feature_matching_closes_most_of_the_feature_gap() {
        let (m, data) = trained_model(1);
        // Stride across the class-major layout so the subset mixes classes.
        let idx: Vec<usize> = (0..16).map(|i| i * 32).collect();
        let small = data.train.subset(&idx).unwrap();
        let cfg = DistillConfig { iters: 400, step: 0.05, seed: 7 };
        let built = feature_match(&m, &small, &cfg).unwrap();
        assert_eq!(built.labels, small.labels);
        assert_eq!(built.name, "dnr");

        let sources = pick_sources(&small, 7).unwrap();
        let want = features_of(&m, &small.images).unwrap();
        let got = features_of(&m, &built.images).unwrap();
        let f = want.shape()[1];
        let mut improved = 0;
        for smp in 0..small.len() {
            let dist = |feats: &Buffer| -> f64 {
                (0..f)
                    .map(|k| (feats.data()[smp * f + k] - want.data()[smp * f + k]).powi(2))
                    .sum()
            };
            let start_feats = features_of(&m, &small.image(sources[smp])).unwrap();
            let start: f64 = (0..f)
                .map(|k| (start_feats.data()[k] - want.data()[smp * f + k]).powi(2))
                .sum();
            if dist(&got) < 0.5 * start.max(1e-12) {
                improved += 1;
            }
        }
        assert!(improved >= 12, "only {improved}/16 samples closed half the gap");
    }

    #[test]
    fn distilled_name_tracks_the_teacher_provenance() {
        let (mut m, data) = trained_model(2);
        m.adversarially_trained = true;
        let idx: Vec<usize> = (0..8).map(|i| i * 64).collect();
        let small = data.train.subset(&idx).unwrap();
        let built =
            feature_match(&m, &small, &DistillConfig { iters: 5, step: 0.1, seed: 1 }).unwrap();
        assert_eq!(built.name, "dr");
    }

    #[test]
    fn relabeling_hits_its_targets_on_a_trained_model() {
        let (m, data) = trained_model(3);
        let det = relabel(&m, &data.train, RelabelTargets::NextClass, 9).unwrap();
        assert_eq!(det.name, "ddet");
        for (new, old) in det.labels.iter().zip(&data.train.labels) {
            assert_eq!(*new, (old + 1) % 4);
        }
        let preds = {
            let fwd = m
                .eval_forward(&m.bind_const(), &Tensor::constant(det.images.clone()))
                .unwrap();
            ops::argmax_rows(fwd.logits.buffer()).unwrap()
        };
        let hit = preds.iter().zip(&det.labels).filter(|(p, y)| p == y).count();
        assert!(
            hit as f64 / det.len() as f64 > 0.9,
            "only {hit}/{} reached their target class",
            det.len()
        );
    }

    #[test]
    fn random_targets_differ_from_origin_and_are_seeded() {
        let (m, data) = trained_model(4);
        let idx: Vec<usize> = (0..16).collect();
        let small = data.train.subset(&idx).unwrap();
        let a = relabel(&m, &small, RelabelTargets::Random, 5).unwrap();
        let b = relabel(&m, &small, RelabelTargets::Random, 5).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.name, "drand");
        for (new, old) in a.labels.iter().zip(&small.labels) {
            assert_ne!(new, old);
        }
        let c = relabel(&m, &small, RelabelTargets::Random, 6).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn conflict_samples_place_brittle_and_robust_classes_one_apart() {
        let (m, data) = trained_model(5);
        let idx: Vec<usize> = (0..8).collect();
        let dr = data.train.subset(&idx).unwrap();
        let conflict = conflict_set(&m, &dr, 2).unwrap();
        assert_eq!(conflict.name, "dconflict");
        for (lab, origin) in conflict.labels.iter().zip(&dr.labels) {
            assert_eq!(*lab, (origin + 1) % 4);
        }
        let report = conflict_eval(&m, &conflict).unwrap();
        assert!((report.nrf_rate + report.rf_rate + report.other_rate - 1.0).abs() < 1e-12);
        assert_eq!(report.n, 8);
        // The model that planted the cues should follow them.
        assert!(report.nrf_rate > report.rf_rate, "{report:?}");
    }
}

//! Cross-model attack transfer: substitute-versus-target success matrices,
//! a sweep over one substitute's training checkpoints, and transfer of
//! rebuilt feature datasets into freshly trained models.

use super::csv::{fmt_f64, Table, EXCLUDED};
use crate::attacks::{run_attack, AttackConfig};
use crate::data::{Dataset, SyntheticData};
use crate::error::{Error, Result};
use crate::features::{feature_match, DistillConfig};
use crate::nn::{load_checkpoint, train, Mode, Model, ModelConfig, TrainCallback, TrainConfig};
use crate::par::{self, Exec};
use crate::tensor::{ops, Buffer, Tensor};
use std::path::Path;

/// Largest evaluation batch a transfer run will craft or score.
pub const TRANSFER_EVAL_CAP: usize = 1000;

fn cap_batch(images: &Buffer, labels: &[usize]) -> Result<(Buffer, Vec<usize>)> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "transfer",
            detail: format!("images {shape:?} with {} labels", labels.len()),
        });
    }
    let n = shape[0].min(TRANSFER_EVAL_CAP);
    let d: usize = shape[1..].iter().product();
    let mut s = shape;
    s[0] = n;
    let x = Buffer::new(images.data()[..n * d].to_vec(), s)?;
    Ok((x, labels[..n].to_vec()))
}

fn check_models(names_and_models: &[(&str, &Model)]) -> Result<()> {
    let (_, first) = names_and_models[0];
    let mismatched: Vec<&str> = names_and_models
        .iter()
        .filter(|(_, m)| {
            m.config.classes != first.config.classes || m.config.input != first.config.input
        })
        .map(|(n, _)| *n)
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "models {mismatched:?} disagree on class count or input shape"
        )));
    }
    Ok(())
}

fn misclassified_rate(model: &Model, x: &Buffer, labels: &[usize]) -> Result<f64> {
    let fwd = model.eval_forward(&model.bind_const(), &Tensor::constant(x.clone()))?;
    let pred = ops::argmax_rows(fwd.logits.buffer())?;
    let wrong = pred.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub attack: AttackConfig,
    pub substitutes: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[i][j]` is the rate at which examples crafted on substitute
    /// `i` are misclassified by target `j`.
    pub cells: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn to_table(&self) -> Result<Table> {
        let mut columns = vec!["substitute"];
        columns.extend(self.targets.iter().map(String::as_str));
        let mut t = Table::new(&columns);
        for (name, row) in self.substitutes.iter().zip(&self.cells) {
            let mut cells = vec![name.clone()];
            cells.extend(row.iter().map(|&v| fmt_f64(v)));
            t.push_row(cells)?;
        }
        Ok(t)
    }

    /// Mean success of substitute `i` against every target that is not the
    /// substitute itself, matched by name.
    pub fn avg_off_diagonal(&self, i: usize) -> Result<f64> {
        let sub = self
            .substitutes
            .get(i)
            .ok_or_else(|| Error::Data(format!("no substitute at index {i}")))?;
        let vals: Vec<f64> = self.targets
            .iter()
            .zip(&self.cells[i])
            .filter(|(name, _)| *name != sub)
            .map(|(_, &v)| v)
            .collect();
        if vals.is_empty() {
            return Err(Error::Data(format!(
                "substitute {sub:?} has no off-diagonal targets"
            )));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Crafts one adversarial batch per substitute and scores it against every
/// target. Each substitute gets a single attack run; the same crafted
/// batch is shown to all targets so columns are directly comparable.
pub fn transfer_matrix(
    substitutes: &[(&str, &Model)],
    targets: &[(&str, &Model)],
    attack: &AttackConfig,
    images: &Buffer,
    labels: &[usize],
    seed: u64,
) -> Result<TransferMatrix> {
    if substitutes.is_empty() || targets.is_empty() {
        return Err(Error::InvalidConfig(
            "transfer needs at least one substitute and one target".into(),
        ));
    }
    if attack.targeted {
        return Err(Error::InvalidConfig(
            "transfer success is defined for untargeted attacks".into(),
        ));
    }
    let all: Vec<(&str, &Model)> =
        substitutes.iter().chain(targets.iter()).copied().collect();
    check_models(&all)?;
    let (x, y) = cap_batch(images, labels)?;

    let rows = par::map_indexed(Exec::Auto, substitutes, |i, (name, model)| {
        let res = run_attack(model, &x, &y, attack, Mode::Eval, seed, &[i as u64])
            .map_err(|e| e.in_run(format!("substitute {name}")))?;
        targets
            .iter()
            .map(|(tname, tmodel)| {
                misclassified_rate(tmodel, &res.adv, &y)
                    .map_err(|e| e.in_run(format!("target {tname}")))
            })
            .collect::<Result<Vec<f64>>>()
    });
    let cells = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TransferMatrix {
        attack: attack.clone(),
        substitutes: substitutes.iter().map(|(n, _)| n.to_string()).collect(),
        targets: targets.iter().map(|(n, _)| n.to_string()).collect(),
        cells,
    })
}

#[derive(Debug, Clone)]
pub struct EpochSweep {
    /// `(epoch, mean transfer success over targets)` sorted by epoch.
    pub rows: Vec<(usize, f64)>,
    /// Row with the highest success; ties go to the earliest epoch.
    pub best: (usize, f64),
}

impl EpochSweep {
    pub fn to_table(&self) -> Result<Table> {
        let mut t = Table::new(&["row_kind", "epoch", "avg_success"]);
        for &(epoch, v) in &self.rows {
            t.push_row(vec!["epoch".into(), epoch.to_string(), fmt_f64(v)])?;
        }
        t.push_row(vec!["best".into(), self.best.0.to_string(), fmt_f64(self.best.1)])?;
        Ok(t)
    }

    /// Whether transfer success peaks strictly inside the checkpoint range
    /// rather than at either end. Needs at least three checkpoints to be
    /// meaningful.
    pub fn interior_maximum(&self) -> Result<bool> {
        if self.rows.len() < 3 {
            return Err(Error::Data(format!(
                "interior maximum needs at least 3 checkpoints, got {}",
                self.rows.len()
            )));
        }
        let best_idx = self
            .rows
            .iter()
            .position(|&(e, _)| e == self.best.0)
            .expect("best row comes from rows");
        Ok(best_idx > 0 && best_idx + 1 < self.rows.len())
    }
}

/// Loads every `ckpt_epoch_<k>` under `ckpt_dir`, crafts examples on each
/// checkpoint in epoch order, and records the mean success against
/// `targets`.
pub fn epoch_sweep(
    ckpt_dir: &Path,
    targets: &[(&str, &Model)],
    attack: &AttackConfig,
    images: &Buffer,
    labels: &[usize],
    seed: u64,
) -> Result<EpochSweep> {
    let mut found = Vec::new();
    let mut epochs = Vec::new();
    for entry in std::fs::read_dir(ckpt_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix("ckpt_epoch_").and_then(|s| s.parse::<usize>().ok()) {
            epochs.push((k, entry.path()));
        } else {
            found.push(name);
        }
    }
    if epochs.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no ckpt_epoch_<k> files under {}; found {found:?}",
            ckpt_dir.display()
        )));
    }
    epochs.sort_by_key(|&(k, _)| k);

    let mut rows = Vec::with_capacity(epochs.len());
    for (k, path) in &epochs {
        let model = load_checkpoint(path)?;
        let named = [("checkpoint", &model)];
        let m = transfer_matrix(&named, targets, attack, images, labels, seed)
            .map_err(|e| e.in_run(format!("epoch {k}")))?;
        let avg = m.cells[0].iter().sum::<f64>() / m.cells[0].len() as f64;
        rows.push((*k, avg));
    }
    let best = rows
        .iter()
        .copied()
        .fold(rows[0], |acc, r| if r.1 > acc.1 { r } else { acc });
    Ok(EpochSweep { rows, best })
}

#[derive(Debug, Clone)]
pub struct FeatureTransfer {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[i][j]` is the clean test accuracy of target config `j`
    /// trained from scratch on source `i`'s rebuilt dataset; NaN marks the
    /// skipped source-equals-target cell.
    pub cells: Vec<Vec<f64>>,
}

impl FeatureTransfer {
    pub fn to_table(&self) -> Result<Table> {
        let mut columns = vec!["source"];
        columns.extend(self.targets.iter().map(String::as_str));
        let mut t = Table::new(&columns);
        for (name, row) in self.sources.iter().zip(&self.cells) {
            let mut cells = vec![name.clone()];
            cells.extend(row.iter().map(|&v| {
                if v.is_nan() { EXCLUDED.to_string() } else { fmt_f64(v) }
            }));
            t.push_row(cells)?;
        }
        Ok(t)
    }
}

/// Rebuilds the training set through each source model's features, trains
/// every differently named target configuration on the rebuilt set, and
/// reports clean accuracy on the untouched test split. High accuracy means
/// the cues the source encodes carry across architectures.
pub fn feature_transfer_eval(
    sources: &[(&str, &Model)],
    targets: &[(&str, &ModelConfig)],
    distill: &DistillConfig,
    train_cfg: &TrainConfig,
    data: &SyntheticData,
    seed: u64,
) -> Result<FeatureTransfer> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::InvalidConfig(
            "feature transfer needs at least one source and one target".into(),
        ));
    }
    let mut cells = Vec::with_capacity(sources.len());
    for (sname, source) in sources {
        let rebuilt: Dataset = feature_match(source, &data.train, distill)
            .map_err(|e| e.in_run(format!("source {sname}")))?;
        let mut row = Vec::with_capacity(targets.len());
        for (tname, tcfg) in targets {
            if tname == sname {
                row.push(f64::NAN);
                continue;
            }
            let mut model = Model::build(tcfg, seed)?;
            // Only the final accuracy matters here, so per-epoch
            // evaluation stays off whatever the incoming config says.
            let cfg = TrainConfig { seed, eval_epochs: false, ..train_cfg.clone() };
            train(&mut model, &rebuilt, &data.test, &cfg, &mut TrainCallback::default())
                .map_err(|e| e.in_run(format!("source {sname} target {tname}")))?;
            let acc = 1.0 - misclassified_rate(&model, &data.test.images, &data.test.labels)?;
            row.push(acc);
        }
        cells.push(row);
    }
    Ok(FeatureTransfer {
        sources: sources.iter().map(|(n, _)| n.to_string()).collect(),
        targets: targets.iter().map(|(n, _)| n.to_string()).collect(),
        cells,
    })
}

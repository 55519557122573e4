//! Per-epoch trend runs and single-factor sweeps.
//!
//! A trend run trains one configuration across the seed list and logs clean
//! accuracy, robust accuracy, and gradient similarity per epoch: one CSV per
//! seed plus an aggregate of seed means and stds. A factor sweep repeats the
//! trend run over a grid of values for exactly one knob, echoing each value
//! verbatim into the combined CSV.

use super::csv::{fmt_f64, Table};
use super::{mean_std, ExperimentConfig};
use crate::data::{generate, SyntheticData};
use crate::error::{Error, Result};
use crate::nn::{train, Model, TrainCallback, TrainConfig, TrainReport};
use crate::par::{self, Exec};
use std::path::PathBuf;

/// Column order of every per-seed trend CSV.
pub const TREND_COLUMNS: [&str; 6] =
    ["seed", "epoch", "train_loss", "clean_acc", "robust_acc", "ligs"];

/// Column order of every trend aggregate CSV.
pub const AGGREGATE_COLUMNS: [&str; 9] = [
    "epoch",
    "loss_mean",
    "loss_std",
    "clean_mean",
    "clean_std",
    "robust_mean",
    "robust_std",
    "ligs_mean",
    "ligs_std",
];

#[derive(Debug)]
pub struct TrendReport {
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<TrainReport>,
    /// Final model of each seed's run, in seed order.
    pub models: Vec<Model>,
    pub aggregate: Table,
}

impl TrendReport {
    /// Values of one final-epoch metric across seeds, in seed order.
    pub fn final_metric(&self, metric: &str) -> Result<Vec<f64>> {
        self.per_seed
            .iter()
            .map(|r| {
                let row = r
                    .rows
                    .last()
                    .ok_or_else(|| Error::Data("trend run logged no epochs".into()))?;
                Ok(match metric {
                    "train_loss" => row.train_loss,
                    "clean_acc" => row.clean_acc,
                    "robust_acc" => row.robust_acc,
                    "ligs" => row.ligs,
                    other => return Err(Error::Data(format!("unknown metric {other:?}"))),
                })
            })
            .collect()
    }
}

fn train_one(cfg: &ExperimentConfig, data: &SyntheticData, seed: u64) -> Result<(TrainReport, Model)> {
    let mut model = Model::build(&cfg.model, seed)?;
    // Trend logging is the point of the run, so per-epoch evaluation is
    // always on regardless of the incoming flag.
    let tcfg = TrainConfig { seed, eval_epochs: true, ..cfg.train.clone() };
    let report = train(&mut model, &data.train, &data.test, &tcfg, &mut TrainCallback::default())?;
    Ok((report, model))
}

fn aggregate(per_seed: &[TrainReport]) -> Result<Table> {
    let epochs = per_seed[0].rows.len();
    for r in per_seed {
        if r.rows.len() != epochs {
            return Err(Error::Data("seed runs logged different epoch counts".into()));
        }
    }
    let mut table = Table::new(&AGGREGATE_COLUMNS);
    for e in 0..epochs {
        let pick = |f: fn(&crate::nn::EpochRow) -> f64| -> (f64, f64) {
            let vals: Vec<f64> = per_seed.iter().map(|r| f(&r.rows[e])).collect();
            mean_std(&vals)
        };
        let (lm, ls) = pick(|r| r.train_loss);
        let (cm, cs) = pick(|r| r.clean_acc);
        let (rm, rs) = pick(|r| r.robust_acc);
        let (gm, gs) = pick(|r| r.ligs);
        table.push_row(vec![
            per_seed[0].rows[e].epoch.to_string(),
            fmt_f64(lm),
            fmt_f64(ls),
            fmt_f64(cm),
            fmt_f64(cs),
            fmt_f64(rm),
            fmt_f64(rs),
            fmt_f64(gm),
            fmt_f64(gs),
        ])?;
    }
    Ok(table)
}

/// Trains `cfg` once per seed and writes `seed-<s>.csv` files plus
/// `aggregate.csv` and the canonical `config.txt` into the run directory.
pub fn run_trend(cfg: &ExperimentConfig) -> Result<TrendReport> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), cfg.canonical_text())?;

    let results = par::map_indexed(Exec::Auto, &cfg.seeds, |_, &seed| train_one(cfg, &data, seed));
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut models = Vec::with_capacity(cfg.seeds.len());
    for (i, res) in results.into_iter().enumerate() {
        let seed = cfg.seeds[i];
        let (report, model) =
            res.map_err(|e| e.in_run(format!("run {} seed {}", cfg.run_id(), seed)))?;
        per_seed.push(report);
        models.push(model);
    }

    for (seed, report) in cfg.seeds.iter().zip(&per_seed) {
        let mut t = Table::new(&TREND_COLUMNS);
        for row in &report.rows {
            t.push_row(vec![
                seed.to_string(),
                row.epoch.to_string(),
                fmt_f64(row.train_loss),
                fmt_f64(row.clean_acc),
                fmt_f64(row.robust_acc),
                fmt_f64(row.ligs),
            ])?;
        }
        t.write(&dir.join(format!("seed-{seed}.csv")))?;
    }

    let agg = aggregate(&per_seed)?;
    agg.write(&dir.join("aggregate.csv"))?;
    Ok(TrendReport { dir, seeds: cfg.seeds.clone(), per_seed, models, aggregate: agg })
}

/// The one knob a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    Width,
    Depth,
    Activation,
    WeightDecay,
    InitLr,
    Optimizer,
}

impl Factor {
    pub fn to_text(self) -> &'static str {
        match self {
            Factor::Width => "width",
            Factor::Depth => "depth",
            Factor::Activation => "activation",
            Factor::WeightDecay => "weight_decay",
            Factor::InitLr => "init_lr",
            Factor::Optimizer => "optimizer",
        }
    }

    pub fn from_text(s: &str) -> Result<Factor> {
        Ok(match s {
            "width" => Factor::Width,
            "depth" => Factor::Depth,
            "activation" => Factor::Activation,
            "weight_decay" => Factor::WeightDecay,
            "init_lr" => Factor::InitLr,
            "optimizer" => Factor::Optimizer,
            other => return Err(Error::Config(format!("unknown sweep factor {other:?}"))),
        })
    }

    /// Config key the factor writes through, in canonical `section.key` form.
    fn key(self) -> &'static str {
        match self {
            Factor::Width => "model.width",
            Factor::Depth => "model.depth",
            Factor::Activation => "model.activation",
            Factor::WeightDecay => "train.weight_decay",
            Factor::InitLr => "train.lr",
            Factor::Optimizer => "train.optimizer",
        }
    }

    /// Applies one grid value by rewriting the canonical config text, so a
    /// sweep value goes through exactly the same strict parsing as a config
    /// file or a command-line override.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut kv = cfg.to_kv();
        kv.set(self.key(), value);
        ExperimentConfig::from_kv(&kv, &cfg.out_dir)
    }
}

#[derive(Debug)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub factor: Factor,
    pub values: Vec<String>,
    /// One trend report per grid value, in grid order.
    pub runs: Vec<TrendReport>,
    /// All aggregate rows with `factor` and `factor_value` columns prepended.
    pub combined: Table,
}

/// Runs the trend experiment once per grid value of `factor`, everything
/// else held fixed. Grid values are echoed verbatim into the combined CSV's
/// `factor_value` column.
pub fn run_factor_sweep(
    cfg: &ExperimentConfig,
    factor: Factor,
    values: &[String],
) -> Result<SweepReport> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;

    let mut runs = Vec::with_capacity(values.len());
    for value in values {
        let mut arm = factor
            .apply(cfg, value)
            .map_err(|e| e.in_run(format!("sweep value {value:?}")))?;
        arm.out_dir = dir.clone();
        runs.push(
            run_trend(&arm).map_err(|e| e.in_run(format!("sweep value {value:?}")))?,
        );
    }

    let mut columns: Vec<&str> = vec!["factor", "factor_value"];
    columns.extend_from_slice(&AGGREGATE_COLUMNS);
    let mut combined = Table::new(&columns);
    for (value, run) in values.iter().zip(&runs) {
        for row in &run.aggregate.rows {
            let mut cells = vec![factor.to_text().to_string(), value.clone()];
            cells.extend(row.iter().cloned());
            combined.push_row(cells)?;
        }
    }
    combined.write(&dir.join("sweep.csv"))?;
    Ok(SweepReport { dir, factor, values: values.to_vec(), runs, combined })
}

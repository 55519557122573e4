//! Multi-seed experiment drivers and their CSV reports.
//!
//! Each driver trains or evaluates across a seed list, writes one CSV per
//! seed plus an aggregate, and names its output directory by the hash of the
//! canonical config text, so a rerun with the same config lands on the same
//! bytes. Effect-direction claims between two arms use [`directional`]: the
//! gap between seed means must exceed the pooled seed standard deviation.

mod csv;
mod landscape;
mod transfer;
mod trend;

pub use csv::{fmt_f64, Table, EXCLUDED};
pub use landscape::{landscape_probe, probe_step, LandscapeTrace, ProbePoint, PROBE_MULTIPLES};
pub use transfer::{
    epoch_sweep, feature_transfer_eval, transfer_matrix, EpochSweep, FeatureTransfer,
    TransferMatrix, TRANSFER_EVAL_CAP,
};
pub use trend::{run_factor_sweep, run_trend, Factor, SweepReport, TrendReport};

use crate::config::Kv;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Trend,
    Sweep,
    Transfer,
    Epochs,
    Features,
    Landscape,
}

impl ExperimentKind {
    pub fn to_text(self) -> &'static str {
        match self {
            ExperimentKind::Trend => "trend",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::Epochs => "epochs",
            ExperimentKind::Features => "features",
            ExperimentKind::Landscape => "landscape",
        }
    }

    pub fn from_text(s: &str) -> Result<ExperimentKind> {
        Ok(match s {
            "trend" => ExperimentKind::Trend,
            "sweep" => ExperimentKind::Sweep,
            "transfer" => ExperimentKind::Transfer,
            "epochs" => ExperimentKind::Epochs,
            "features" => ExperimentKind::Features,
            "landscape" => ExperimentKind::Landscape,
            other => return Err(Error::Config(format!("unknown experiment kind {other:?}"))),
        })
    }
}

/// One experiment: what to run, on which model/training/data settings, over
/// which seeds, into which directory.
///
/// The canonical text form covers everything except `out_dir`, so moving the
/// output root never changes a run's identity hash.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            kind: ExperimentKind::Trend,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn merge(kv: &mut Kv, prefix: &str, inner: &Kv) {
    for key in inner.keys() {
        kv.set(&format!("{prefix}.{key}"), inner.get(key).unwrap());
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment needs at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("duplicate seeds would repeat identical runs".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        kv.set("kind", self.kind.to_text());
        let joined: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        kv.set("seeds", joined.join(","));
        merge(&mut kv, "model", &self.model.to_kv());
        merge(&mut kv, "train", &self.train.to_kv());
        merge(&mut kv, "data", &self.data.to_kv());
        kv
    }

    pub fn from_kv(kv: &Kv, out_dir: &Path) -> Result<ExperimentConfig> {
        let mut r = kv.reader();
        let kind = ExperimentKind::from_text(&r.str_or("kind", "trend"))?;
        let seeds = match r.opt_str("seeds") {
            None => vec![0, 1, 2],
            Some(raw) => raw
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("bad seed entry {p:?}")))
                })
                .collect::<Result<Vec<u64>>>()?,
        };
        let cfg = ExperimentConfig {
            kind,
            model: ModelConfig::from_kv(&r.section("model"))?,
            train: TrainConfig::from_kv(&r.section("train"))?,
            data: SyntheticSpec::from_kv(&r.section("data"))?,
            seeds,
            out_dir: out_dir.to_path_buf(),
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical config text; its hash names the run directory.
    pub fn canonical_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", self.kind.to_text(), self.to_kv().hash12())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_id())
    }
}

/// Mean and sample standard deviation (n-1 denominator; zero for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outcome of the documented statistical rule for effect directions: the
/// difference of seed means must exceed the pooled seed standard deviation.
#[derive(Clone, Copy, Debug)]
pub struct DirectionalCheck {
    pub mean_a: f64,
    pub mean_b: f64,
    pub gap: f64,
    pub pooled_std: f64,
    pub significant: bool,
}

/// Checks whether arm `a` sits above arm `b` by more than the pooled std.
pub fn directional(a: &[f64], b: &[f64]) -> DirectionalCheck {
    let (mean_a, std_a) = mean_std(a);
    let (mean_b, std_b) = mean_std(b);
    let gap = mean_a - mean_b;
    let pooled_std = ((std_a * std_a + std_b * std_b) / 2.0).sqrt();
    DirectionalCheck {
        mean_a,
        mean_b,
        gap,
        pooled_std,
        significant: gap.is_finite() && pooled_std.is_finite() && gap > pooled_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_hash_ignores_output_dir() {
        let cfg = ExperimentConfig {
            kind: ExperimentKind::Sweep,
            seeds: vec![3, 7],
            out_dir: PathBuf::from("a"),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_kv(&cfg.to_kv(), Path::new("b")).unwrap();
        assert_eq!(back.kind, cfg.kind);
        assert_eq!(back.seeds, cfg.seeds);
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.run_id(), cfg.run_id());
        assert_ne!(back.out_dir, cfg.out_dir);
    }

    #[test]
    fn seed_list_must_be_nonempty_and_distinct() {
        let mut cfg = ExperimentConfig { seeds: vec![], ..ExperimentConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        cfg.seeds = vec![1, 1];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        cfg.seeds = vec![1, 2];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn distinct_configs_get_distinct_run_directories() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seeds: vec![9], ..ExperimentConfig::default() };
        assert_ne!(a.run_id(), b.run_id());
        assert!(a.run_dir().starts_with("runs"));
    }

    #[test]
    fn directional_rule_requires_gap_beyond_pooled_spread() {
        let clear = directional(&[0.9, 0.92, 0.91], &[0.5, 0.52, 0.51]);
        assert!(clear.significant);
        assert!((clear.gap - 0.4).abs() < 1e-12);
        let noisy = directional(&[0.9, 0.5, 0.7], &[0.68, 0.7, 0.72]);
        assert!(!noisy.significant);
        let nan = directional(&[f64::NAN, 1.0], &[0.0, 0.0]);
        assert!(!nan.significant);
    }

    #[test]
    fn mean_std_handles_tiny_samples() {
        assert!(mean_std(&[]).0.is_nan());
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64).sqrt()).abs() < 1e-12);
    }
}

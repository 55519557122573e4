//! Models: normalization variants, three small architectures, two
//! initialization schemes, optimizers, and the training loops.

mod ckpt;
mod model;
mod norm;
mod optim;
mod train;

pub use ckpt::{load_checkpoint, save_checkpoint, save_epoch_checkpoint};
pub use model::{Forward, Model};
pub use norm::{group_norm, normalize, RunningStat};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{
    eval_attack, train, EpochRow, LigsMode, TrainCallback, TrainConfig, TrainReport,
    EVAL_ATTACK_EPS, EVAL_ATTACK_STEPS, EVAL_SAMPLE_CAP,
};

use crate::config::Kv;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Batch,
    Instance,
    Layer,
    Group(usize),
}

impl NormKind {
    fn to_text(self) -> String {
        match self {
            NormKind::None => "none".into(),
            NormKind::Batch => "batch".into(),
            NormKind::Instance => "instance".into(),
            NormKind::Layer => "layer".into(),
            NormKind::Group(g) => format!("group({g})"),
        }
    }

    fn from_text(s: &str) -> Result<NormKind> {
        match s {
            "none" => Ok(NormKind::None),
            "batch" => Ok(NormKind::Batch),
            "instance" => Ok(NormKind::Instance),
            "layer" => Ok(NormKind::Layer),
            _ => {
                if let Some(inner) = s.strip_prefix("group(").and_then(|r| r.strip_suffix(')')) {
                    let g: usize = inner
                        .parse()
                        .map_err(|_| Error::Config(format!("bad group count in norm {s:?}")))?;
                    if g == 0 {
                        return Err(Error::Config("group norm needs at least one group".into()));
                    }
                    Ok(NormKind::Group(g))
                } else {
                    Err(Error::Config(format!("unknown norm {s:?}")))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Selu,
}

impl Activation {
    pub fn apply(&self, x: &crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
        use crate::tensor::ops;
        match self {
            Activation::Relu => ops::relu(x),
            Activation::LeakyRelu(slope) => ops::leaky_relu(x, *slope),
            Activation::Selu => ops::selu(x),
        }
    }

    fn to_text(self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(s) => format!("leaky_relu({s})"),
            Activation::Selu => "selu".into(),
        }
    }

    fn from_text(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "selu" => Ok(Activation::Selu),
            _ => {
                if let Some(inner) = s.strip_prefix("leaky_relu(").and_then(|r| r.strip_suffix(')'))
                {
                    let slope: f64 = inner
                        .parse()
                        .map_err(|_| Error::Config(format!("bad slope in activation {s:?}")))?;
                    Ok(Activation::LeakyRelu(slope))
                } else {
                    Err(Error::Config(format!("unknown activation {s:?}")))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    SmallCnn,
    MiniResNet,
}

impl Arch {
    fn to_text(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::SmallCnn => "smallcnn",
            Arch::MiniResNet => "miniresnet",
        }
    }

    fn from_text(s: &str) -> Result<Arch> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "smallcnn" => Ok(Arch::SmallCnn),
            "miniresnet" => Ok(Arch::MiniResNet),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Standard,
    Fixup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// mlp: hidden layers; smallcnn: convs per block; miniresnet: residual
    /// blocks per stage.
    pub depth: usize,
    /// mlp: hidden units; cnn variants: base channel count.
    pub width: usize,
    pub norm: NormKind,
    pub activation: Activation,
    pub shortcut: bool,
    pub init: Init,
    pub classes: usize,
    /// Input as (channels, height, width).
    pub input: (usize, usize, usize),
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            arch: Arch::SmallCnn,
            depth: 1,
            width: 8,
            norm: NormKind::None,
            activation: Activation::Relu,
            shortcut: false,
            init: Init::Standard,
            classes: 4,
            input: (1, 8, 8),
            norm_eps: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.width == 0 {
            return Err(Error::InvalidConfig("width must be positive".into()));
        }
        let depth_range = match self.arch {
            Arch::Mlp => 2..=6,
            Arch::SmallCnn => 1..=3,
            Arch::MiniResNet => 1..=3,
        };
        if !depth_range.contains(&self.depth) {
            return Err(Error::InvalidConfig(format!(
                "depth {} outside {:?} for {}",
                self.depth,
                depth_range,
                self.arch.to_text()
            )));
        }
        if self.init == Init::Fixup && !(self.arch == Arch::MiniResNet && self.shortcut) {
            return Err(Error::InvalidConfig(
                "fixup initialization requires the residual architecture with shortcuts enabled"
                    .into(),
            ));
        }
        if self.shortcut && self.arch != Arch::MiniResNet {
            return Err(Error::InvalidConfig(format!(
                "shortcut flag only applies to miniresnet, not {}",
                self.arch.to_text()
            )));
        }
        match self.arch {
            Arch::SmallCnn | Arch::MiniResNet => {
                let (_, h, w) = self.input;
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "convolutional nets need input sides divisible by 4, got {h}x{w}"
                    )));
                }
            }
            Arch::Mlp => {}
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !s.is_finite() || s < 0.0 || s >= 1.0 {
                return Err(Error::InvalidConfig(format!("leaky slope {s} outside [0, 1)")));
            }
        }
        if !(0.0 < self.norm_momentum && self.norm_momentum <= 1.0) {
            return Err(Error::InvalidConfig("norm momentum must be in (0, 1]".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        kv.set("arch", self.arch.to_text());
        kv.set("depth", self.depth);
        kv.set("width", self.width);
        kv.set("norm", self.norm.to_text());
        kv.set("activation", self.activation.to_text());
        kv.set("shortcut", self.shortcut);
        kv.set("init", match self.init {
            Init::Standard => "standard",
            Init::Fixup => "fixup",
        });
        kv.set("classes", self.classes);
        kv.set("input", format!("{}x{}x{}", self.input.0, self.input.1, self.input.2));
        kv.set("norm_eps", self.norm_eps);
        kv.set("norm_momentum", self.norm_momentum);
        kv
    }

    pub fn from_kv(kv: &Kv) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let mut r = kv.reader();
        let cfg = ModelConfig {
            arch: Arch::from_text(&r.str_or("arch", d.arch.to_text()))?,
            depth: r.usize_or("depth", d.depth)?,
            width: r.usize_or("width", d.width)?,
            norm: NormKind::from_text(&r.str_or("norm", &d.norm.to_text()))?,
            activation: Activation::from_text(&r.str_or("activation", &d.activation.to_text()))?,
            shortcut: r.bool_or("shortcut", d.shortcut)?,
            init: match r.str_or("init", "standard").as_str() {
                "standard" => Init::Standard,
                "fixup" => Init::Fixup,
                other => return Err(Error::Config(format!("unknown init {other:?}"))),
            },
            classes: r.usize_or("classes", d.classes)?,
            input: {
                let raw = r.str_or("input", "1x8x8");
                let parts: Vec<&str> = raw.split('x').collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("input {raw:?} is not CxHxW")));
                }
                let dim = |s: &str| -> Result<usize> {
                    s.parse()
                        .map_err(|_| Error::Config(format!("bad input dimension {s:?}")))
                };
                (dim(parts[0])?, dim(parts[1])?, dim(parts[2])?)
            },
            norm_eps: r.f64_or("norm_eps", d.norm_eps)?,
            norm_momentum: r.f64_or("norm_momentum", d.norm_momentum)?,
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the penultimate feature vector.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Arch::Mlp => self.width,
            Arch::SmallCnn => 2 * self.width,
            Arch::MiniResNet => 4 * self.width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_config_round_trips_through_text() {
        let cfg = ModelConfig {
            arch: Arch::MiniResNet,
            depth: 2,
            width: 12,
            norm: NormKind::Group(4),
            activation: Activation::LeakyRelu(0.01),
            shortcut: true,
            init: Init::Fixup,
            classes: 4,
            input: (1, 8, 8),
            ..ModelConfig::default()
        };
        let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn fixup_without_shortcut_is_rejected_with_the_constraint() {
        let cfg = ModelConfig {
            arch: Arch::MiniResNet,
            shortcut: false,
            init: Init::Fixup,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("shortcut"), "{msg}"),
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let mut kv = ModelConfig::default().to_kv();
        kv.set("wdith", 16);
        match ModelConfig::from_kv(&kv) {
            Err(Error::Config(msg)) => assert!(msg.contains("wdith"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}

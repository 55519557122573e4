//! Model construction and the forward pass for the three architectures.
//!
//! Parameter initialization draws each tensor from an RNG stream keyed by
//! the parameter's name, so values depend only on (seed, name) and never
//! on creation order. The build walk and the forward walk use the same
//! name scheme; a forward pass fails loudly if either walk drifts.

use super::norm::{RunningStat, RunningView};
use super::{Activation, Arch, Init, Mode, ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::{ops, Buffer, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Output of one forward pass.
pub struct Forward {
    /// Raw class scores, `[N, classes]`.
    pub logits: Tensor,
    /// Features feeding the final linear layer, `[N, feature_dim]`.
    pub penultimate: Tensor,
}

/// A classifier: its configuration, parameter buffers, and batch-norm
/// running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Buffer>,
    pub running: BTreeMap<String, RunningStat>,
    /// Epochs of training applied so far.
    pub epoch: usize,
    /// True when the training loop ran with an inner attack; feature
    /// extraction uses this to tell robustified models apart.
    pub adversarially_trained: bool,
}

fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn activation_gain(act: Activation) -> f64 {
    match act {
        Activation::Relu => 2.0,
        Activation::LeakyRelu(s) => 2.0 / (1.0 + s * s),
        Activation::Selu => 1.0,
    }
}

struct ParamBuilder {
    seed: u64,
    params: BTreeMap<String, Buffer>,
}

impl ParamBuilder {
    /// Gaussian fill with the given standard deviation.
    fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) {
        let mut rng = stream_rng(self.seed, stream::INIT, &[name_hash(name)]);
        let buf = Buffer::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        self.params.insert(name.to_string(), buf);
    }

    fn fill(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        self.params.insert(name.to_string(), Buffer::full(shape, value));
    }

    /// Affine pair (or conv/dense bias) for one layer, chosen by the norm
    /// kind: a bias without normalization, gamma and beta with it.
    fn layer_tail(&mut self, cfg: &ModelConfig, prefix: &str, ch: usize, bias_shape: Vec<usize>) {
        if cfg.norm == NormKind::None {
            self.fill(&format!("{prefix}.b"), bias_shape, 0.0);
        } else {
            self.fill(&format!("{prefix}.norm.gamma"), vec![ch], 1.0);
            self.fill(&format!("{prefix}.norm.beta"), vec![ch], 0.0);
        }
    }
}

fn build_mlp(cfg: &ModelConfig, b: &mut ParamBuilder) {
    let gain = activation_gain(cfg.activation);
    let (c, h, w) = cfg.input;
    let mut dim = c * h * w;
    for i in 0..cfg.depth {
        let name = format!("fc{i}");
        b.normal(&format!("{name}.w"), vec![dim, cfg.width], (gain / dim as f64).sqrt());
        b.layer_tail(cfg, &name, cfg.width, vec![1, cfg.width]);
        dim = cfg.width;
    }
    b.normal("head.w", vec![dim, cfg.classes], (1.0 / dim as f64).sqrt());
    b.fill("head.b", vec![1, cfg.classes], 0.0);
}

fn smallcnn_channels(cfg: &ModelConfig) -> [usize; 3] {
    [cfg.width, 2 * cfg.width, 2 * cfg.width]
}

fn build_smallcnn(cfg: &ModelConfig, b: &mut ParamBuilder) {
    let gain = activation_gain(cfg.activation);
    let mut in_ch = cfg.input.0;
    for (bi, &ch) in smallcnn_channels(cfg).iter().enumerate() {
        for j in 0..cfg.depth {
            let name = format!("block{bi}.conv{j}");
            let fan_in = in_ch * 9;
            b.normal(&format!("{name}.w"), vec![ch, in_ch, 3, 3], (gain / fan_in as f64).sqrt());
            b.layer_tail(cfg, &name, ch, vec![ch]);
            in_ch = ch;
        }
    }
    b.normal("head.w", vec![in_ch, cfg.classes], (1.0 / in_ch as f64).sqrt());
    b.fill("head.b", vec![1, cfg.classes], 0.0);
}

fn resnet_widths(cfg: &ModelConfig) -> [usize; 3] {
    [cfg.width, 2 * cfg.width, 4 * cfg.width]
}

/// Residual branch convolutions shrink with the block count under fixup,
/// so the network starts as (nearly) the identity on its shortcut path.
fn build_miniresnet(cfg: &ModelConfig, b: &mut ParamBuilder) {
    let gain = activation_gain(cfg.activation);
    let fixup = cfg.init == Init::Fixup;
    let branch_scale = if fixup {
        (3.0 * cfg.depth as f64).powf(-0.5)
    } else {
        1.0
    };
    let in_c = cfg.input.0;
    b.normal("stem.conv.w", vec![cfg.width, in_c, 3, 3], (gain / (in_c * 9) as f64).sqrt());
    b.layer_tail(cfg, "stem.conv", cfg.width, vec![cfg.width]);
    let mut in_ch = cfg.width;
    for (s, &out_ch) in resnet_widths(cfg).iter().enumerate() {
        for k in 0..cfg.depth {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            let pfx = format!("s{s}.b{k}");
            let fan1 = in_ch * 9;
            b.normal(
                &format!("{pfx}.conv1.w"),
                vec![out_ch, in_ch, 3, 3],
                (gain / fan1 as f64).sqrt() * branch_scale,
            );
            b.layer_tail(cfg, &format!("{pfx}.conv1"), out_ch, vec![out_ch]);
            if fixup {
                b.fill(&format!("{pfx}.conv2.w"), vec![out_ch, out_ch, 3, 3], 0.0);
            } else {
                let fan2 = out_ch * 9;
                b.normal(
                    &format!("{pfx}.conv2.w"),
                    vec![out_ch, out_ch, 3, 3],
                    (gain / fan2 as f64).sqrt(),
                );
            }
            b.layer_tail(cfg, &format!("{pfx}.conv2"), out_ch, vec![out_ch]);
            if cfg.shortcut && (stride != 1 || in_ch != out_ch) {
                b.normal(
                    &format!("{pfx}.proj.w"),
                    vec![out_ch, in_ch, 1, 1],
                    (1.0 / in_ch as f64).sqrt(),
                );
                b.layer_tail(cfg, &format!("{pfx}.proj"), out_ch, vec![out_ch]);
            }
            in_ch = out_ch;
        }
    }
    if fixup {
        b.fill("head.w", vec![in_ch, cfg.classes], 0.0);
    } else {
        b.normal("head.w", vec![in_ch, cfg.classes], (1.0 / in_ch as f64).sqrt());
    }
    b.fill("head.b", vec![1, cfg.classes], 0.0);
}

fn p<'a>(params: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
}

/// Walk context threaded through one forward pass.
struct Ctx<'a, 'b> {
    cfg: &'a ModelConfig,
    mode: Mode,
    view: &'a mut RunningView<'b>,
}

impl Ctx<'_, '_> {
    fn norm_site(
        &mut self,
        params: &BTreeMap<String, Tensor>,
        x: &Tensor,
        layer: &str,
    ) -> Result<Tensor> {
        if self.cfg.norm == NormKind::None {
            return Ok(x.clone());
        }
        let site = format!("{layer}.norm");
        let gamma = p(params, &format!("{site}.gamma"))?;
        let beta = p(params, &format!("{site}.beta"))?;
        super::norm::normalize(
            x,
            self.cfg.norm,
            &site,
            Some(gamma),
            Some(beta),
            self.cfg.norm_eps,
            self.cfg.norm_momentum,
            self.mode,
            self.view,
        )
    }

    fn use_bias(&self) -> bool {
        self.cfg.norm == NormKind::None
    }
}

fn dense(params: &BTreeMap<String, Tensor>, prefix: &str, x: &Tensor, bias: bool) -> Result<Tensor> {
    let w = p(params, &format!("{prefix}.w"))?;
    let y = ops::matmul(x, w)?;
    if !bias {
        return Ok(y);
    }
    let b = p(params, &format!("{prefix}.b"))?;
    let shape = y.shape().to_vec();
    ops::add(&y, &ops::broadcast_to(b, &shape)?)
}

fn conv(
    params: &BTreeMap<String, Tensor>,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    pad: usize,
    bias: bool,
) -> Result<Tensor> {
    let w = p(params, &format!("{prefix}.w"))?;
    let y = ops::conv2d(x, w, stride, pad)?;
    if !bias {
        return Ok(y);
    }
    let b = p(params, &format!("{prefix}.b"))?;
    let ch = b.numel();
    let shape = y.shape().to_vec();
    ops::add(&y, &ops::broadcast_to(&ops::reshape(b, &[1, ch, 1, 1])?, &shape)?)
}

/// Spatial mean, `[N, C, H, W]` to `[N, C]`.
fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    ops::reshape(&ops::mean_axes(x, &[2, 3])?, &[n, c])
}

fn forward_mlp(ctx: &mut Ctx, params: &BTreeMap<String, Tensor>, x: &Tensor) -> Result<Forward> {
    let n = x.shape()[0];
    let flat_dim: usize = x.shape()[1..].iter().product();
    let mut cur = ops::reshape(x, &[n, flat_dim])?;
    for i in 0..ctx.cfg.depth {
        let name = format!("fc{i}");
        cur = dense(params, &name, &cur, ctx.use_bias())?;
        if ctx.cfg.norm != NormKind::None {
            // Hidden units as channels of a 1x1 image.
            let w = cur.shape()[1];
            let as_img = ops::reshape(&cur, &[n, w, 1, 1])?;
            cur = ops::reshape(&ctx.norm_site(params, &as_img, &name)?, &[n, w])?;
        }
        cur = ctx.cfg.activation.apply(&cur)?;
    }
    let logits = dense(params, "head", &cur, true)?;
    Ok(Forward { logits, penultimate: cur })
}

fn forward_smallcnn(
    ctx: &mut Ctx,
    params: &BTreeMap<String, Tensor>,
    x: &Tensor,
) -> Result<Forward> {
    let mut cur = x.clone();
    for bi in 0..3 {
        for j in 0..ctx.cfg.depth {
            let name = format!("block{bi}.conv{j}");
            cur = conv(params, &name, &cur, 1, 1, ctx.use_bias())?;
            cur = ctx.norm_site(params, &cur, &name)?;
            cur = ctx.cfg.activation.apply(&cur)?;
        }
        if bi < 2 {
            cur = ops::avg_pool(&cur, 2, 2)?;
        }
    }
    let pooled = global_avg_pool(&cur)?;
    let logits = dense(params, "head", &pooled, true)?;
    Ok(Forward { logits, penultimate: pooled })
}

fn forward_miniresnet(
    ctx: &mut Ctx,
    params: &BTreeMap<String, Tensor>,
    x: &Tensor,
) -> Result<Forward> {
    let cfg = ctx.cfg;
    let mut cur = conv(params, "stem.conv", x, 1, 1, ctx.use_bias())?;
    cur = ctx.norm_site(params, &cur, "stem.conv")?;
    cur = cfg.activation.apply(&cur)?;
    let mut in_ch = cfg.width;
    for (s, &out_ch) in resnet_widths(cfg).iter().enumerate() {
        for k in 0..cfg.depth {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            let pfx = format!("s{s}.b{k}");
            let mut branch = conv(params, &format!("{pfx}.conv1"), &cur, stride, 1, ctx.use_bias())?;
            branch = ctx.norm_site(params, &branch, &format!("{pfx}.conv1"))?;
            branch = cfg.activation.apply(&branch)?;
            branch = conv(params, &format!("{pfx}.conv2"), &branch, 1, 1, ctx.use_bias())?;
            branch = ctx.norm_site(params, &branch, &format!("{pfx}.conv2"))?;
            let merged = if cfg.shortcut {
                let short = if stride != 1 || in_ch != out_ch {
                    let proj = conv(params, &format!("{pfx}.proj"), &cur, stride, 0, ctx.use_bias())?;
                    ctx.norm_site(params, &proj, &format!("{pfx}.proj"))?
                } else {
                    cur.clone()
                };
                ops::add(&branch, &short)?
            } else {
                branch
            };
            cur = cfg.activation.apply(&merged)?;
            in_ch = out_ch;
        }
    }
    let pooled = global_avg_pool(&cur)?;
    let logits = dense(params, "head", &pooled, true)?;
    Ok(Forward { logits, penultimate: pooled })
}

fn run_forward(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    x: &Tensor,
    mode: Mode,
    view: &mut RunningView<'_>,
) -> Result<Forward> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.input.0 || s[2] != cfg.input.1 || s[3] != cfg.input.2 {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!("input {:?} does not match configured {:?}", s, cfg.input),
        });
    }
    let mut ctx = Ctx { cfg, mode, view };
    match cfg.arch {
        Arch::Mlp => forward_mlp(&mut ctx, params, x),
        Arch::SmallCnn => forward_smallcnn(&mut ctx, params, x),
        Arch::MiniResNet => forward_miniresnet(&mut ctx, params, x),
    }
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut b = ParamBuilder { seed, params: BTreeMap::new() };
        match config.arch {
            Arch::Mlp => build_mlp(config, &mut b),
            Arch::SmallCnn => build_smallcnn(config, &mut b),
            Arch::MiniResNet => build_miniresnet(config, &mut b),
        }
        Ok(Model {
            config: config.clone(),
            params: b.params,
            running: BTreeMap::new(),
            epoch: 0,
            adversarially_trained: false,
        })
    }

    /// Parameters as tracked leaves of `tape`, for training.
    pub fn bind(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    /// Parameters as constants, for attacks and evaluation where only the
    /// input needs gradients.
    pub fn bind_const(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::constant(v.clone())))
            .collect()
    }

    /// Forward pass. Train mode lets batch normalization update the
    /// model's running statistics.
    pub fn forward(
        &mut self,
        params: &BTreeMap<String, Tensor>,
        x: &Tensor,
        mode: Mode,
    ) -> Result<Forward> {
        let mut view = match mode {
            Mode::Train => RunningView::Updating(&mut self.running),
            Mode::Eval => RunningView::Frozen(&self.running),
        };
        run_forward(&self.config, params, x, mode, &mut view)
    }

    /// Eval-mode forward that never touches running statistics.
    pub fn eval_forward(&self, params: &BTreeMap<String, Tensor>, x: &Tensor) -> Result<Forward> {
        self.frozen_forward(params, x, Mode::Eval)
    }

    /// Forward in either mode without updating running statistics.
    /// Attacks inside a training loop run in train mode (fresh batch
    /// statistics) but must not pollute the model's running averages.
    pub fn frozen_forward(
        &self,
        params: &BTreeMap<String, Tensor>,
        x: &Tensor,
        mode: Mode,
    ) -> Result<Forward> {
        let mut view = RunningView::Frozen(&self.running);
        run_forward(&self.config, params, x, mode, &mut view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TapeMode;

    fn input(n: usize, cfg: &ModelConfig, seed: u64) -> Buffer {
        let (c, h, w) = cfg.input;
        let mut rng = stream_rng(seed, stream::EVAL, &[99]);
        Buffer::from_fn(vec![n, c, h, w], |_| rng.sample::<f64, _>(StandardNormal) * 0.5 + 0.5)
    }

    #[test]
    fn builds_are_bit_identical_per_seed_and_differ_across_seeds() {
        let cfg = ModelConfig { arch: Arch::MiniResNet, shortcut: true, ..ModelConfig::default() };
        let a = Model::build(&cfg, 7).unwrap();
        let b = Model::build(&cfg, 7).unwrap();
        let c = Model::build(&cfg, 8).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (k, v) in &a.params {
            assert_eq!(v.data(), b.params[k].data(), "{k}");
        }
        assert_ne!(a.params["head.w"].data(), c.params["head.w"].data());
    }

    #[test]
    fn standard_init_variance_tracks_fan_in() {
        // fc0 maps 64 inputs to 128 relu units: variance should be 2/64.
        let cfg = ModelConfig { arch: Arch::Mlp, depth: 2, width: 128, ..ModelConfig::default() };
        let mut samples = Vec::new();
        for seed in 0..10 {
            let m = Model::build(&cfg, seed).unwrap();
            samples.extend_from_slice(m.params["fc0.w"].data());
        }
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        let var: f64 =
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        let want = 2.0 / 64.0;
        assert!((var - want).abs() < 0.1 * want, "var {var} vs {want}");
    }

    #[test]
    fn fixup_network_starts_at_uniform_class_probabilities() {
        let cfg = ModelConfig {
            arch: Arch::MiniResNet,
            shortcut: true,
            init: Init::Fixup,
            ..ModelConfig::default()
        };
        let m = Model::build(&cfg, 3).unwrap();
        let x = Tensor::constant(input(5, &cfg, 1));
        let out = m.eval_forward(&m.bind_const(), &x).unwrap();
        for &v in out.logits.data() {
            assert!(v.abs() < 1e-12, "logit {v}");
        }
        let nonzero = out.penultimate.data().iter().any(|&v| v != 0.0);
        assert!(nonzero, "stem path should still produce features");
    }

    #[test]
    fn penultimate_width_matches_feature_dim() {
        for arch in [Arch::Mlp, Arch::SmallCnn, Arch::MiniResNet] {
            let cfg = ModelConfig {
                arch,
                depth: 2,
                width: 6,
                shortcut: arch == Arch::MiniResNet,
                ..ModelConfig::default()
            };
            let m = Model::build(&cfg, 0).unwrap();
            let x = Tensor::constant(input(3, &cfg, 2));
            let out = m.eval_forward(&m.bind_const(), &x).unwrap();
            assert_eq!(out.penultimate.shape(), &[3, cfg.feature_dim()], "{arch:?}");
            assert_eq!(out.logits.shape(), &[3, cfg.classes], "{arch:?}");
        }
    }

    #[test]
    fn eval_forward_is_bit_identical_across_calls() {
        let cfg = ModelConfig {
            arch: Arch::MiniResNet,
            norm: NormKind::Group(2),
            shortcut: true,
            ..ModelConfig::default()
        };
        let m = Model::build(&cfg, 11).unwrap();
        let x = Tensor::constant(input(4, &cfg, 5));
        let a = m.eval_forward(&m.bind_const(), &x).unwrap();
        let b = m.eval_forward(&m.bind_const(), &x).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn shortcut_flag_changes_the_function() {
        let with = ModelConfig { arch: Arch::MiniResNet, shortcut: true, ..ModelConfig::default() };
        let without = ModelConfig { shortcut: false, ..with.clone() };
        let x = Tensor::constant(input(2, &with, 9));
        let ma = Model::build(&with, 4).unwrap();
        let mb = Model::build(&without, 4).unwrap();
        let ya = ma.eval_forward(&ma.bind_const(), &x).unwrap();
        let yb = mb.eval_forward(&mb.bind_const(), &x).unwrap();
        assert_ne!(ya.logits.data(), yb.logits.data());
    }

    #[test]
    fn train_mode_batch_norm_populates_every_site() {
        let cnn = ModelConfig { norm: NormKind::Batch, ..ModelConfig::default() };
        let mut m = Model::build(&cnn, 0).unwrap();
        let x = Tensor::constant(input(6, &cnn, 3));
        m.forward(&m.bind_const(), &x, Mode::Train).unwrap();
        assert_eq!(m.running.len(), 3, "one site per conv block");

        let res = ModelConfig {
            arch: Arch::MiniResNet,
            norm: NormKind::Batch,
            shortcut: true,
            ..ModelConfig::default()
        };
        let mut m = Model::build(&res, 0).unwrap();
        let x = Tensor::constant(input(6, &res, 3));
        m.forward(&m.bind_const(), &x, Mode::Train).unwrap();
        // stem + 3 blocks x (norm1, norm2) + projections in stages 1 and 2.
        assert_eq!(m.running.len(), 1 + 6 + 2);
        m.eval_forward(&m.bind_const(), &x).unwrap();
    }

    #[test]
    fn missing_parameter_is_reported_by_name() {
        let cfg = ModelConfig::default();
        let m = Model::build(&cfg, 0).unwrap();
        let mut params = m.bind_const();
        params.remove("head.b");
        let x = Tensor::constant(input(2, &cfg, 1));
        match m.eval_forward(&params, &x) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("head.b"), "{msg}"),
            other => panic!("expected checkpoint error, got {:?}", other.map(|f| f.logits)),
        }
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let cases = [
            ModelConfig { arch: Arch::Mlp, depth: 2, norm: NormKind::Layer, ..ModelConfig::default() },
            ModelConfig { norm: NormKind::Batch, ..ModelConfig::default() },
            ModelConfig {
                arch: Arch::MiniResNet,
                norm: NormKind::Group(2),
                shortcut: true,
                ..ModelConfig::default()
            },
        ];
        for cfg in cases {
            let mut m = Model::build(&cfg, 1).unwrap();
            let tape = Tape::with_mode(TapeMode::FirstOrder);
            let params = m.bind(&tape);
            let x = tape.leaf(input(4, &cfg, 7));
            let out = m.forward(&params, &x, Mode::Train).unwrap();
            let loss = ops::softmax_cross_entropy(&out.logits, &[0, 1, 2, 3]).unwrap();
            let grads = tape.backward(&loss.mean).unwrap();
            for (name, t) in &params {
                assert!(
                    grads.wrt(t).is_some(),
                    "{:?}: no gradient for {name}",
                    cfg.arch
                );
            }
            assert!(grads.wrt(&x).is_some(), "input gradient");
        }
    }

    #[test]
    fn input_shape_mismatch_is_rejected() {
        let cfg = ModelConfig::default();
        let m = Model::build(&cfg, 0).unwrap();
        let x = Tensor::constant(Buffer::zeros(vec![2, 1, 4, 4]));
        assert!(m.eval_forward(&m.bind_const(), &x).is_err());
    }
}

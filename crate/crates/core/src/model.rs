//! The full saliency model: a frozen transformer encoder shared by every
//! input image, per-input adapter groups, slice and modality fusion, and a
//! convolutional decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::inter_modal::{inter_modal_fuse, InterModalParams};
use crate::inter_slice::{concat_slice_fuse, inter_slice_fuse, ConcatFusionParams, InterSliceParams};
use crate::layers::{from_tokens, Conv, LayerNorm, Linear};
use crate::losses::ScribbleMask;
use crate::params::{join, visit_leaves, Module, ModuleExt, Visitor};
use crate::scalar::Scalar;
use crate::tensor::{Activation, PoolKind, Tape, Tensor};

/// How the K slice features are merged before modality fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceFusion {
    /// Four-direction selective scan over the slice-token grid.
    Mamba,
    /// Channel concatenation followed by a 1×1 convolution.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Feature channels `d`.
    pub dim: usize,
    /// States per channel `N`.
    pub state_size: usize,
    /// Slice adapter groups `G`; slice `k` uses group `min(k, G)`.
    pub groups: usize,
    pub decoder_stages: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Adapter bottleneck is `dim / adapter_ratio`.
    pub adapter_ratio: usize,
    pub encoder_seed: u64,
    pub init_seed: u64,
    pub slice_fusion: SliceFusion,
    /// Slice count the concatenation baseline is built for.
    pub slices: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            dim: 64,
            state_size: 8,
            groups: 4,
            decoder_stages: 3,
            encoder_blocks: 4,
            heads: 4,
            mlp_ratio: 2,
            adapter_ratio: 4,
            encoder_seed: 7,
            init_seed: 1,
            slice_fusion: SliceFusion::Mamba,
            slices: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("dim", self.dim),
            ("state_size", self.state_size),
            ("groups", self.groups),
            ("encoder_blocks", self.encoder_blocks),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("adapter_ratio", self.adapter_ratio),
            ("slices", self.slices),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model.{name} must be positive")));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::dim(
                "model config",
                format!("image size {} is not divisible by patch {}", self.image_size, self.patch),
            ));
        }
        if 1usize.checked_shl(self.decoder_stages as u32) != Some(self.patch) {
            return Err(Error::dim(
                "model config",
                format!("patch {} must equal 2^decoder_stages = 2^{}", self.patch, self.decoder_stages),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::contract(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim < self.adapter_ratio {
            return Err(Error::contract("adapter bottleneck would be empty"));
        }
        Ok(())
    }

    /// Side of the encoder token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Output channels of each decoder stage.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut c = self.dim;
        (0..self.decoder_stages)
            .map(|_| {
                c = (c / 2).max(8);
                c
            })
            .collect()
    }
}

// ------------------------------------------------------------------ encoder

#[derive(Clone, Debug)]
pub struct EncoderBlock<S: Scalar> {
    pub ln1: LayerNorm<S>,
    pub qkv: Linear<S>,
    pub proj: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub mlp1: Linear<S>,
    pub mlp2: Linear<S>,
}

impl<S: Scalar> Module<S> for EncoderBlock<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.ln1.visit(&join(prefix, "ln1"), f)?;
        self.qkv.visit(&join(prefix, "qkv"), f)?;
        self.proj.visit(&join(prefix, "proj"), f)?;
        self.ln2.visit(&join(prefix, "ln2"), f)?;
        self.mlp1.visit(&join(prefix, "mlp1"), f)?;
        self.mlp2.visit(&join(prefix, "mlp2"), f)
    }
}

/// Seeded random transformer; never trained.
#[derive(Clone, Debug)]
pub struct FrozenEncoder<S: Scalar> {
    pub patch: usize,
    pub heads: usize,
    /// `[d, 3·patch²]`
    pub embed: Linear<S>,
    /// `[d, 2h, 2w]` position embedding on the base grid.
    pub pos: Tensor<S>,
    pub blocks: Vec<EncoderBlock<S>>,
    pub seed: u64,
}

impl<S: Scalar> FrozenEncoder<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let rng = &mut init::rng(cfg.encoder_seed);
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let embed = Linear::init(d, 3 * cfg.patch * cfg.patch, rng);
        let pos = init::randn(vec![d, 2 * cfg.grid(), 2 * cfg.grid()], 0.1, rng);
        let blocks = (0..cfg.encoder_blocks)
            .map(|_| EncoderBlock {
                ln1: LayerNorm::new(d),
                qkv: Linear::init(3 * d, d, rng),
                proj: Linear::init(d, d, rng),
                ln2: LayerNorm::new(d),
                mlp1: Linear::init(hidden, d, rng),
                mlp2: Linear::init(d, hidden, rng),
            })
            .collect();
        FrozenEncoder { patch: cfg.patch, heads: cfg.heads, embed, pos, blocks, seed: cfg.encoder_seed }
    }

    pub fn dim(&self) -> usize {
        self.embed.w.shape()[0]
    }
}

impl<S: Scalar> Module<S> for FrozenEncoder<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.embed.visit(&join(prefix, "embed"), f)?;
        f(&join(prefix, "pos"), &mut self.pos)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("block.{i}")), f)?;
        }
        Ok(())
    }
}

/// Bottleneck branch `W_up·ReLU(W_down·x + b_down) + b_up`.
#[derive(Clone, Debug)]
pub struct FeatureAdapter<S: Scalar> {
    pub down: Linear<S>,
    /// Zero at initialization.
    pub up: Linear<S>,
}

impl<S: Scalar> FeatureAdapter<S> {
    pub fn init(d: usize, ratio: usize, rng: &mut InitRng) -> Self {
        let r = d / ratio;
        FeatureAdapter { down: Linear::init(r, d, rng), up: Linear::zeros(d, r) }
    }
}

impl<S: Scalar> Module<S> for FeatureAdapter<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        visit_leaves(
            prefix,
            &mut [
                ("w_down", &mut self.down.w),
                ("b_down", &mut self.down.b),
                ("w_up", &mut self.up.w),
                ("b_up", &mut self.up.b),
            ],
            f,
        )
    }
}

/// Trainable adapters for one input role.
#[derive(Clone, Debug)]
pub struct AdapterGroup<S: Scalar> {
    /// 3×3 `d → d`, identity at initialization.
    pub position: Conv<S>,
    pub blocks: Vec<FeatureAdapter<S>>,
}

impl<S: Scalar> AdapterGroup<S> {
    pub fn init(cfg: &ModelConfig, rng: &mut InitRng) -> Self {
        AdapterGroup {
            position: Conv::identity(cfg.dim, 3, false),
            blocks: (0..cfg.encoder_blocks)
                .map(|_| FeatureAdapter::init(cfg.dim, cfg.adapter_ratio, rng))
                .collect(),
        }
    }
}

impl<S: Scalar> Module<S> for AdapterGroup<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.position.visit(&join(prefix, "pos"), f)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("block.{i}")), f)?;
        }
        Ok(())
    }
}

/// `[3, H, W]` image to `[h·w, 3·p²]` patch vectors (channel, row, column
/// order inside a patch).
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let (c, hh, ww) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim("encode", format!("image must be [3, H, W], got {s:?}"))),
    };
    if hh % patch != 0 || ww % patch != 0 {
        return Err(Error::dim(
            "encode",
            format!("image {hh}×{ww} is not divisible by patch {patch}"),
        ));
    }
    let (h, w) = (hh / patch, ww / patch);
    // [c, h, p, w, p] -> [h, w, c, p, p]
    image
        .reshape(vec![c, h, patch, w, patch])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape(vec![h * w, c * patch * patch])
}

/// 2×2 max pool of the base position grid, then the adapter's 3×3 conv.
pub fn position_adapter<S: Scalar>(pos: &Tensor<S>, conv: &Conv<S>) -> Result<Tensor<S>> {
    conv.apply(&pool_position(pos)?)
}

fn pool_position<S: Scalar>(pos: &Tensor<S>) -> Result<Tensor<S>> {
    if pos.rank() != 3 || pos.shape()[1] % 2 != 0 || pos.shape()[2] % 2 != 0 {
        return Err(Error::dim(
            "position_adapter",
            format!("position grid {:?} must be [d, 2h, 2w] with even sides", pos.shape()),
        ));
    }
    pos.pool2d(PoolKind::Max, 2, 2)
}

pub fn feature_adapter<S: Scalar>(x: &Tensor<S>, adapter: &FeatureAdapter<S>) -> Result<Tensor<S>> {
    adapter.up.apply(&adapter.down.apply(x)?.relu())
}

fn attention<S: Scalar>(x: &Tensor<S>, blk: &EncoderBlock<S>, heads: usize) -> Result<Tensor<S>> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let qkv = blk
        .qkv
        .apply(x)?
        .reshape(vec![l, 3, heads, dh])?
        .permute(&[1, 2, 0, 3])?
        .unstack0()?;
    let (q, k, v) = (&qkv[0], &qkv[1], &qkv[2]);
    let scores = q
        .bmm(&k.permute(&[0, 2, 1])?)?
        .scale(S::lit(1.0 / (dh as f64).sqrt()))
        .softmax();
    let mixed = scores.bmm(v)?.permute(&[1, 0, 2])?.reshape(vec![l, d])?;
    blk.proj.apply(&mixed)
}

/// Encodes `[3, H, W]` to `[d, H/p, W/p]`. Without a group the position grid
/// is only max-pooled and no feature adapters run.
pub fn encode<S: Scalar>(
    image: &Tensor<S>,
    group: Option<&AdapterGroup<S>>,
    enc: &FrozenEncoder<S>,
) -> Result<Tensor<S>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::dim("encode", format!("image must be [3, H, W], got {:?}", image.shape())));
    }
    let patches = patchify(image, enc.patch)?;
    let (h, w) = (image.shape()[1] / enc.patch, image.shape()[2] / enc.patch);
    if [2 * h, 2 * w] != enc.pos.shape()[1..] {
        return Err(Error::dim(
            "encode",
            format!("token grid {h}×{w} does not match position grid {:?}", enc.pos.shape()),
        ));
    }
    let pos = match group {
        Some(g) => position_adapter(&enc.pos, &g.position)?,
        None => pool_position(&enc.pos)?,
    };
    let pos_tokens = crate::layers::to_tokens(&pos)?;
    let mut tok = enc.embed.apply(&patches)?.add(&pos_tokens)?;
    for (i, blk) in enc.blocks.iter().enumerate() {
        let h1 = tok.add(&attention(&blk.ln1.apply(&tok)?, blk, enc.heads)?)?;
        let z = blk.ln2.apply(&h1)?;
        let mlp = blk.mlp2.apply(&blk.mlp1.apply(&z)?.activation(Activation::Gelu))?;
        tok = h1.add(&mlp)?;
        if let Some(g) = group {
            let adapter = g.blocks.get(i).ok_or_else(|| {
                Error::contract(format!("adapter group has {} blocks, encoder has {}", g.blocks.len(), enc.blocks.len()))
            })?;
            tok = tok.add(&feature_adapter(&z, adapter)?)?;
        }
    }
    from_tokens(&tok, h, w)
}

// ------------------------------------------------------------------ decoder

#[derive(Clone, Debug)]
pub struct Decoder<S: Scalar> {
    pub stages: Vec<Conv<S>>,
    /// 3×3 to a single channel.
    pub head: Conv<S>,
}

impl<S: Scalar> Decoder<S> {
    pub fn init(cfg: &ModelConfig, rng: &mut InitRng) -> Self {
        let mut c = cfg.dim;
        let stages = cfg
            .decoder_channels()
            .into_iter()
            .map(|next| {
                let conv = Conv::init(next, c, 3, rng);
                c = next;
                conv
            })
            .collect();
        let mut head = Conv::init(1, c, 3, rng);
        head.b = Tensor::zeros(vec![1]);
        Decoder { stages, head }
    }
}

impl<S: Scalar> Module<S> for Decoder<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit(&join(prefix, &format!("stage.{i}")), f)?;
        }
        self.head.visit(&join(prefix, "head"), f)
    }
}

/// `[d, h, w]` features to an `[H, W]` map in (0, 1); `H = h·2^s`.
pub fn decode<S: Scalar>(f: &Tensor<S>, dec: &Decoder<S>, out: (usize, usize)) -> Result<Tensor<S>> {
    let (h, w) = match f.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::dim("decode", format!("features must be [d, h, w], got {s:?}"))),
    };
    let scale = 1usize << dec.stages.len();
    if out.0 != h * scale || out.1 != w * scale {
        return Err(Error::dim(
            "decode",
            format!(
                "output {}×{} is not {h}×{w} upsampled by 2^{}",
                out.0,
                out.1,
                dec.stages.len()
            ),
        ));
    }
    let mut x = f.clone();
    for stage in &dec.stages {
        x = stage.apply(&x)?.upsample2x()?.relu();
    }
    dec.head.apply(&x)?.sigmoid().reshape(vec![out.0, out.1])
}

// -------------------------------------------------------------------- model

#[derive(Clone, Debug)]
pub enum SliceFusionParams<S: Scalar> {
    Mamba(InterSliceParams<S>),
    Concat(ConcatFusionParams<S>),
}

impl<S: Scalar> Module<S> for SliceFusionParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        match self {
            SliceFusionParams::Mamba(p) => p.visit(&join(prefix, "inter_slice"), f),
            SliceFusionParams::Concat(p) => p.visit(&join(prefix, "slice_concat"), f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub encoder: FrozenEncoder<S>,
    /// Group 0 serves the all-focus image, groups `1..=G` the slices.
    pub adapters: Vec<AdapterGroup<S>>,
    pub slice_fusion: SliceFusionParams<S>,
    pub inter_modal: InterModalParams<S>,
    pub decoder: Decoder<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let rng = &mut init::rng(config.init_seed);
        let (d, n) = (config.dim, config.state_size);
        let adapters = (0..=config.groups).map(|_| AdapterGroup::init(config, rng)).collect();
        let slice_fusion = match config.slice_fusion {
            SliceFusion::Mamba => SliceFusionParams::Mamba(InterSliceParams::init(d, n, rng)),
            SliceFusion::Concat => SliceFusionParams::Concat(ConcatFusionParams::init(d, config.slices, rng)),
        };
        Ok(ModelParams {
            config: config.clone(),
            encoder: FrozenEncoder::new(config),
            adapters,
            slice_fusion,
            inter_modal: InterModalParams::init(d, n, rng),
            decoder: Decoder::init(config, rng),
        })
    }

    /// Adapter group for input role `k` (0 = all-focus, `k ≥ 1` = slice k).
    pub fn group(&self, k: usize) -> &AdapterGroup<S> {
        &self.adapters[k.min(self.config.groups)]
    }

    /// Copy whose trainable tensors are parameters on `tape`.
    pub fn bind_trainable(&self, tape: &Tape<S>) -> Result<Self> {
        self.bind(tape, is_trainable)
    }
}

impl<S: Scalar> Module<S> for ModelParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.encoder.visit(&join(prefix, "encoder"), f)?;
        for (k, g) in self.adapters.iter_mut().enumerate() {
            g.visit(&join(prefix, &format!("adapter.{k}")), f)?;
        }
        self.slice_fusion.visit(prefix, f)?;
        self.inter_modal.visit(&join(prefix, "inter_modal"), f)?;
        self.decoder.visit(&join(prefix, "decoder"), f)
    }
}

/// Everything except the frozen encoder is trained.
pub fn is_trainable(name: &str) -> bool {
    !name.starts_with("encoder.")
}

/// Names and current values of the trainable tensors.
pub fn trainable_params<S: Scalar>(params: &ModelParams<S>) -> Vec<(String, Tensor<S>)> {
    params
        .named_tensors()
        .into_iter()
        .filter(|(name, _)| is_trainable(name))
        .collect()
}

/// One all-focus image, K slices in focus-depth order, and optional labels.
#[derive(Clone, Debug)]
pub struct FocalStack<S: Scalar> {
    /// `[3, H, W]` in [0, 1].
    pub all_focus: Tensor<S>,
    pub slices: Vec<Tensor<S>>,
    /// `[H, W]` in {0, 1}.
    pub gt: Option<Tensor<S>>,
    pub scribble: Option<ScribbleMask>,
}

impl<S: Scalar> FocalStack<S> {
    pub fn size(&self) -> (usize, usize) {
        let s = self.all_focus.shape();
        (s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.all_focus.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim("focal stack", format!("all-focus image must be [3, H, W], got {s:?}")));
        }
        if self.slices.is_empty() {
            return Err(Error::contract("focal stack has no slices"));
        }
        if let Some(bad) = self.slices.iter().find(|x| x.shape() != s) {
            return Err(Error::dim("focal stack", format!("slice {:?} differs from all-focus {s:?}", bad.shape())));
        }
        let hw = [s[1], s[2]];
        if let Some(gt) = &self.gt {
            if gt.shape() != hw {
                return Err(Error::dim("focal stack", format!("gt {:?} is not {hw:?}", gt.shape())));
            }
        }
        if let Some(sc) = &self.scribble {
            if sc.shape() != (s[1], s[2]) {
                return Err(Error::dim("focal stack", format!("scribble {:?} is not {hw:?}", sc.shape())));
            }
        }
        Ok(())
    }
}

/// Saliency map with the intermediate feature maps it was decoded from.
#[derive(Clone, Debug)]
pub struct ForwardOutput<S: Scalar> {
    /// `[H, W]`
    pub saliency: Tensor<S>,
    pub f0: Tensor<S>,
    pub f_slices: Tensor<S>,
    pub f_fused: Tensor<S>,
}

pub fn forward<S: Scalar>(stack: &FocalStack<S>, params: &ModelParams<S>) -> Result<ForwardOutput<S>> {
    stack.validate()?;
    let enc = &params.encoder;
    let f0 = encode(&stack.all_focus, Some(params.group(0)), enc)?;
    let fk = stack
        .slices
        .iter()
        .enumerate()
        .map(|(i, img)| encode(img, Some(params.group(i + 1)), enc))
        .collect::<Result<Vec<_>>>()?;
    let f_slices = match &params.slice_fusion {
        SliceFusionParams::Mamba(p) => inter_slice_fuse(&fk, p)?,
        SliceFusionParams::Concat(p) => concat_slice_fuse(&fk, p)?,
    };
    let f_fused = inter_modal_fuse(&f0, &f_slices, &params.inter_modal)?;
    let saliency = decode(&f_fused, &params.decoder, stack.size())?;
    Ok(ForwardOutput { saliency, f0, f_slices, f_fused })
}

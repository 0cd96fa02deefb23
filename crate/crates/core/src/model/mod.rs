//! Toy promptable segmentation model: conv image encoder, positional prompt
//! encoder, and a two-way transformer mask decoder with multi-output masks
//! and an IoU prediction head. Teacher and student share the decoder
//! architecture and differ only in encoder width/depth.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::rng::{randn_vec, sub_rng};
use crate::tensor::{
    add, add_bias_chw, add_row_vector, concat_rows, conv2d, gelu, layernorm, matmul, reshape,
    sigmoid, slice_rows, softmax, transpose2d, upsample2x_bilinear, Tensor,
};
use rand_chacha::ChaCha8Rng;

/// Grayscale or RGB image, channel-major floats in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Image {
        assert_eq!(pixels.len(), width * height * channels);
        Image { width, height, channels, pixels }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.pixels.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptPoint {
    pub x: f32,
    pub y: f32,
    pub label: PointLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

/// Labeled point prompts and box prompts driving the mask decoder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
    pub boxes: Vec<PromptBox>,
}

impl PromptSet {
    pub fn single_point(x: f32, y: f32) -> PromptSet {
        PromptSet {
            points: vec![PromptPoint { x, y, label: PointLabel::Positive }],
            boxes: Vec::new(),
        }
    }

    pub fn single_box(x0: f32, y0: f32, x1: f32, y1: f32) -> PromptSet {
        PromptSet { points: Vec::new(), boxes: vec![PromptBox { x0, y0, x1, y1 }] }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty()
    }

    /// Number of rows the prompt encoder emits (one per point, two per box).
    pub fn token_count(&self) -> usize {
        self.points.len() + 2 * self.boxes.len()
    }
}

/// Decoder result: K mask-logit grids at image resolution, K predicted IoUs,
/// and the post-transformer output tokens.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub masks: Tensor,
    pub ious: Tensor,
    pub tokens: Tensor,
}

impl DecoderOutput {
    pub fn num_masks(&self) -> usize {
        self.shape_k()
    }

    fn shape_k(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn iou_values(&self) -> &[f32] {
        self.ious.data()
    }
}

/// Highest-predicted-IoU channel; ties break toward the lowest index.
pub fn select_best_mask(out: &DecoderOutput) -> (usize, f32) {
    let ious = out.iou_values();
    assert!(!ious.is_empty(), "decoder output with zero mask channels");
    let mut best = 0usize;
    for (i, &v) in ious.iter().enumerate().skip(1) {
        if v > ious[best] {
            best = i;
        }
    }
    (best, ious[best])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Teacher,
    Student,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Teacher => "teacher",
            Variant::Student => "student",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "teacher" => Ok(Variant::Teacher),
            "student" => Ok(Variant::Student),
            other => Err(Error::Format(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Hyperparameters shared by the teacher and student variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Embedding dimension D; also the decoder token width.
    pub embed_dim: usize,
    /// Encoder conv widths. The first two blocks stride 2, the rest stride 1.
    pub teacher_channels: Vec<usize>,
    pub student_channels: Vec<usize>,
    /// Internal attention dimension of the two-way transformer.
    pub attn_dim: usize,
    pub mlp_dim: usize,
    pub decoder_layers: usize,
    /// Channel width of the upscaled mask feature map.
    pub mask_channels: usize,
    /// K multi-output mask channels.
    pub num_masks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            in_channels: 1,
            embed_dim: 64,
            teacher_channels: vec![48, 96, 96, 96],
            student_channels: vec![32, 64],
            attn_dim: 32,
            mlp_dim: 128,
            decoder_layers: 2,
            mask_channels: 16,
            num_masks: 3,
        }
    }
}

impl ModelConfig {
    /// Encoder downsampling factor (two stride-2 blocks).
    pub const DOWNSAMPLE: usize = 4;

    pub fn grid_size(&self) -> usize {
        self.image_size / Self::DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % Self::DOWNSAMPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} not divisible by {}",
                self.image_size,
                Self::DOWNSAMPLE
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::InvalidArgument("embed_dim must be divisible by 4".into()));
        }
        if self.teacher_channels.len() < 2 || self.student_channels.len() < 2 {
            return Err(Error::InvalidArgument(
                "encoders need at least two (stride-2) blocks".into(),
            ));
        }
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return Err(Error::InvalidArgument("in_channels must be 1 or 3".into()));
        }
        if self.num_masks < 1 || self.decoder_layers < 1 {
            return Err(Error::InvalidArgument("num_masks and decoder_layers must be >= 1".into()));
        }
        Ok(())
    }

    fn encoder_channels(&self, variant: Variant) -> &[usize] {
        match variant {
            Variant::Teacher => &self.teacher_channels,
            Variant::Student => &self.student_channels,
        }
    }
}

// ── Quantization hook ────────────────────────────────────────────────

/// Which operand of a product a hook is looking at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperandRole {
    A,
    B,
}

/// What produced the operand; drives split-quantization choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActKind {
    Plain,
    PostGelu,
    PostSoftmax,
    Weight,
}

impl ActKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActKind::Plain => "plain",
            ActKind::PostGelu => "post_gelu",
            ActKind::PostSoftmax => "post_softmax",
            ActKind::Weight => "weight",
        }
    }
}

/// Observer/rewriter for every matrix-product operand in the forward pass.
/// Fake quantization and activation recording both plug in here.
pub trait MatHook {
    /// Return a replacement tensor, or None to leave the operand unchanged.
    fn transform(&self, site: &str, role: OperandRole, kind: ActKind, t: &Tensor)
        -> Option<Tensor>;
}

/// A product site in forward order, with each operand's activation kind.
#[derive(Debug, Clone)]
pub struct QuantSite {
    pub name: String,
    pub a_kind: ActKind,
    pub b_kind: ActKind,
}

type Hook<'a> = Option<&'a dyn MatHook>;

fn hooked(hook: Hook, site: &str, role: OperandRole, kind: ActKind, t: &Tensor) -> Tensor {
    match hook.and_then(|h| h.transform(site, role, kind, t)) {
        Some(replaced) => replaced,
        None => t.clone(),
    }
}

fn hooked_matmul(
    hook: Hook,
    site: &str,
    a: &Tensor,
    a_kind: ActKind,
    b: &Tensor,
    b_kind: ActKind,
) -> Result<Tensor> {
    let a = hooked(hook, site, OperandRole::A, a_kind, a);
    let b = hooked(hook, site, OperandRole::B, b_kind, b);
    matmul(&a, &b)
}

fn hooked_conv2d(
    hook: Hook,
    site: &str,
    x: &Tensor,
    x_kind: ActKind,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let x = hooked(hook, site, OperandRole::A, x_kind, x);
    let w = hooked(hook, site, OperandRole::B, ActKind::Weight, w);
    conv2d(&x, &w, stride, pad)
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct ConvBlock {
    w: Tensor,
    b: Tensor,
    ln_g: Tensor,
    ln_b: Tensor,
    stride: usize,
}

#[derive(Debug, Clone)]
struct AttentionParams {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

#[derive(Debug, Clone)]
struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    g: Tensor,
    b: Tensor,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: AttentionParams,
    t2i: AttentionParams,
    i2t: AttentionParams,
    mlp: Mlp,
    ln1: LayerNormParams,
    ln2: LayerNormParams,
    ln3: LayerNormParams,
    ln4: LayerNormParams,
}

/// The full model: encoder for one variant plus the shared-architecture
/// prompt encoder and mask decoder. Immutable during inference; training
/// replaces parameter tensors through [`SegModel::params_mut`].
#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    enc_blocks: Vec<ConvBlock>,
    enc_proj_w: Tensor,
    enc_proj_b: Tensor,
    label_emb: Tensor,
    prompt_proj_w: Tensor,
    prompt_proj_b: Tensor,
    output_tokens: Tensor,
    layers: Vec<DecoderLayer>,
    iou_head: Mlp,
    hyper: Vec<Mlp>,
    upscale_w: Tensor,
    upscale_b: Tensor,
    /// Fixed sinusoidal position codes for the embedding grid (not a param).
    img_pe: Tensor,
}

const LN_EPS: f32 = 1e-5;

fn linear_param(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (1.0 / fan_in as f32).sqrt();
    Tensor::param(&[fan_in, fan_out], randn_vec(rng, fan_in * fan_out, std))
}

fn mlp_param(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Mlp {
    Mlp {
        w1: linear_param(rng, d_in, d_hidden),
        b1: Tensor::param(&[d_hidden], vec![0.0; d_hidden]),
        w2: linear_param(rng, d_hidden, d_out),
        b2: Tensor::param(&[d_out], vec![0.0; d_out]),
    }
}

fn attn_param(rng: &mut ChaCha8Rng, d: usize, a: usize) -> AttentionParams {
    AttentionParams {
        wq: linear_param(rng, d, a),
        wk: linear_param(rng, d, a),
        wv: linear_param(rng, d, a),
        wo: linear_param(rng, a, d),
    }
}

fn ln_param(d: usize) -> LayerNormParams {
    LayerNormParams { g: Tensor::param(&[d], vec![1.0; d]), b: Tensor::param(&[d], vec![0.0; d]) }
}

/// Sinusoidal position code for normalized coordinates (u, v) in [0, 1].
fn position_code(d: usize, u: f32, v: f32) -> Vec<f32> {
    let mut row = Vec::with_capacity(d);
    for k in 0..d / 4 {
        let freq = std::f32::consts::PI * (k + 1) as f32;
        row.push((freq * u).sin());
        row.push((freq * u).cos());
        row.push((freq * v).sin());
        row.push((freq * v).cos());
    }
    row
}

impl SegModel {
    /// Random-initialized model; deterministic for a given seed.
    pub fn new(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<SegModel> {
        cfg.validate()?;
        let mut rng = sub_rng(seed, match variant {
            Variant::Teacher => 0x7e_ac,
            Variant::Student => 0x57_0d,
        });
        let d = cfg.embed_dim;
        let channels = cfg.encoder_channels(variant).to_vec();

        let mut enc_blocks = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f32).sqrt();
            enc_blocks.push(ConvBlock {
                w: Tensor::param(&[cout, cin, 3, 3], randn_vec(&mut rng, cout * cin * 9, std)),
                b: Tensor::param(&[cout], vec![0.0; cout]),
                ln_g: Tensor::param(&[cout], vec![1.0; cout]),
                ln_b: Tensor::param(&[cout], vec![0.0; cout]),
                stride: if i < 2 { 2 } else { 1 },
            });
            cin = cout;
        }
        let enc_proj_w = Tensor::param(
            &[d, cin, 1, 1],
            randn_vec(&mut rng, d * cin, (1.0 / cin as f32).sqrt()),
        );
        let enc_proj_b = Tensor::param(&[d], vec![0.0; d]);

        let tok_std = (1.0 / d as f32).sqrt();
        let label_emb = Tensor::param(&[4, d], randn_vec(&mut rng, 4 * d, tok_std));
        let prompt_proj_w = linear_param(&mut rng, d, d);
        let prompt_proj_b = Tensor::param(&[d], vec![0.0; d]);
        let output_tokens =
            Tensor::param(&[1 + cfg.num_masks, d], randn_vec(&mut rng, (1 + cfg.num_masks) * d, tok_std));

        let layers = (0..cfg.decoder_layers)
            .map(|_| DecoderLayer {
                self_attn: attn_param(&mut rng, d, cfg.attn_dim),
                t2i: attn_param(&mut rng, d, cfg.attn_dim),
                i2t: attn_param(&mut rng, d, cfg.attn_dim),
                mlp: mlp_param(&mut rng, d, cfg.mlp_dim, d),
                ln1: ln_param(d),
                ln2: ln_param(d),
                ln3: ln_param(d),
                ln4: ln_param(d),
            })
            .collect();

        let iou_head = mlp_param(&mut rng, d, d, cfg.num_masks);
        let hyper = (0..cfg.num_masks)
            .map(|_| mlp_param(&mut rng, d, d, cfg.mask_channels))
            .collect();
        let upscale_w = Tensor::param(
            &[cfg.mask_channels, d, 1, 1],
            randn_vec(&mut rng, cfg.mask_channels * d, (1.0 / d as f32).sqrt()),
        );
        let upscale_b = Tensor::param(&[cfg.mask_channels], vec![0.0; cfg.mask_channels]);

        let g = cfg.grid_size();
        let mut pe = Vec::with_capacity(g * g * d);
        for gy in 0..g {
            for gx in 0..g {
                let u = (gx as f32 + 0.5) / g as f32;
                let v = (gy as f32 + 0.5) / g as f32;
                pe.extend(position_code(d, u, v));
            }
        }
        let img_pe = Tensor::new(&[g * g, d], pe);

        Ok(SegModel {
            cfg: cfg.clone(),
            variant,
            enc_blocks,
            enc_proj_w,
            enc_proj_b,
            label_emb,
            prompt_proj_w,
            prompt_proj_b,
            output_tokens,
            layers,
            iou_head,
            hyper,
            upscale_w,
            upscale_b,
            img_pe,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Named parameters in a stable order (checkpoint and optimizer order).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, b) in self.enc_blocks.iter().enumerate() {
            out.push((format!("enc.b{i}.w"), &b.w));
            out.push((format!("enc.b{i}.b"), &b.b));
            out.push((format!("enc.b{i}.ln.g"), &b.ln_g));
            out.push((format!("enc.b{i}.ln.b"), &b.ln_b));
        }
        out.push(("enc.proj.w".into(), &self.enc_proj_w));
        out.push(("enc.proj.b".into(), &self.enc_proj_b));
        out.push(("prompt.label_emb".into(), &self.label_emb));
        out.push(("prompt.proj.w".into(), &self.prompt_proj_w));
        out.push(("prompt.proj.b".into(), &self.prompt_proj_b));
        out.push(("dec.tokens".into(), &self.output_tokens));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("dec.l{i}");
            for (tag, a) in
                [("self", &l.self_attn), ("t2i", &l.t2i), ("i2t", &l.i2t)]
            {
                out.push((format!("{p}.{tag}.wq"), &a.wq));
                out.push((format!("{p}.{tag}.wk"), &a.wk));
                out.push((format!("{p}.{tag}.wv"), &a.wv));
                out.push((format!("{p}.{tag}.wo"), &a.wo));
            }
            out.push((format!("{p}.mlp.w1"), &l.mlp.w1));
            out.push((format!("{p}.mlp.b1"), &l.mlp.b1));
            out.push((format!("{p}.mlp.w2"), &l.mlp.w2));
            out.push((format!("{p}.mlp.b2"), &l.mlp.b2));
            for (tag, ln) in [("ln1", &l.ln1), ("ln2", &l.ln2), ("ln3", &l.ln3), ("ln4", &l.ln4)]
            {
                out.push((format!("{p}.{tag}.g"), &ln.g));
                out.push((format!("{p}.{tag}.b"), &ln.b));
            }
        }
        out.push(("dec.iou.w1".into(), &self.iou_head.w1));
        out.push(("dec.iou.b1".into(), &self.iou_head.b1));
        out.push(("dec.iou.w2".into(), &self.iou_head.w2));
        out.push(("dec.iou.b2".into(), &self.iou_head.b2));
        for (k, h) in self.hyper.iter().enumerate() {
            out.push((format!("dec.hyper{k}.w1"), &h.w1));
            out.push((format!("dec.hyper{k}.b1"), &h.b1));
            out.push((format!("dec.hyper{k}.w2"), &h.w2));
            out.push((format!("dec.hyper{k}.b2"), &h.b2));
        }
        out.push(("dec.upscale.w".into(), &self.upscale_w));
        out.push(("dec.upscale.b".into(), &self.upscale_b));
        out
    }

    /// Mutable parameter handles in the same order as [`SegModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.enc_blocks {
            out.push(&mut b.w);
            out.push(&mut b.b);
            out.push(&mut b.ln_g);
            out.push(&mut b.ln_b);
        }
        out.push(&mut self.enc_proj_w);
        out.push(&mut self.enc_proj_b);
        out.push(&mut self.label_emb);
        out.push(&mut self.prompt_proj_w);
        out.push(&mut self.prompt_proj_b);
        out.push(&mut self.output_tokens);
        for l in &mut self.layers {
            for a in [&mut l.self_attn, &mut l.t2i, &mut l.i2t] {
                out.push(&mut a.wq);
                out.push(&mut a.wk);
                out.push(&mut a.wv);
                out.push(&mut a.wo);
            }
            out.push(&mut l.mlp.w1);
            out.push(&mut l.mlp.b1);
            out.push(&mut l.mlp.w2);
            out.push(&mut l.mlp.b2);
            for ln in [&mut l.ln1, &mut l.ln2, &mut l.ln3, &mut l.ln4] {
                out.push(&mut ln.g);
                out.push(&mut ln.b);
            }
        }
        out.push(&mut self.iou_head.w1);
        out.push(&mut self.iou_head.b1);
        out.push(&mut self.iou_head.w2);
        out.push(&mut self.iou_head.b2);
        for h in &mut self.hyper {
            out.push(&mut h.w1);
            out.push(&mut h.b1);
            out.push(&mut h.w2);
            out.push(&mut h.b2);
        }
        out.push(&mut self.upscale_w);
        out.push(&mut self.upscale_b);
        out
    }

    /// Copy prompt-encoder and decoder weights from `other` (encoders differ,
    /// the rest is architecturally identical).
    pub fn adopt_decoder_from(&mut self, other: &SegModel) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::InvalidArgument(
                "decoder adoption requires identical model configs".into(),
            ));
        }
        let src: std::collections::HashMap<String, Tensor> = other
            .params()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("enc."))
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let names: Vec<String> = self.params().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.into_iter().zip(self.params_mut()) {
            if let Some(t) = src.get(&name) {
                *slot = Tensor::param(t.shape(), t.data().to_vec());
            }
        }
        Ok(())
    }

    // ── Encoder ──────────────────────────────────────────────────────

    /// Image embedding `[D, g, g]`. Deterministic; cache freely.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        self.encode_image_hooked(image, None)
    }

    pub fn encode_image_hooked(&self, image: &Image, hook: Hook) -> Result<Tensor> {
        if image.width != self.cfg.image_size
            || image.height != self.cfg.image_size
            || image.channels != self.cfg.in_channels
        {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                lhs: vec![image.channels, image.height, image.width],
                rhs: vec![self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size],
            });
        }
        let mut x = image.to_tensor();
        for (i, blk) in self.enc_blocks.iter().enumerate() {
            let kind = if i == 0 { ActKind::Plain } else { ActKind::PostGelu };
            let conv =
                hooked_conv2d(hook, &format!("enc.b{i}"), &x, kind, &blk.w, blk.stride, 1)?;
            let conv = add_bias_chw(&conv, &blk.b)?;
            let normed = layernorm_chw(&conv, &blk.ln_g, &blk.ln_b)?;
            x = gelu(&normed);
        }
        let proj = hooked_conv2d(hook, "enc.proj", &x, ActKind::PostGelu, &self.enc_proj_w, 1, 0)?;
        add_bias_chw(&proj, &self.enc_proj_b)
    }

    // ── Prompt encoder ───────────────────────────────────────────────

    /// One row per point and per box corner: sinusoidal position code plus a
    /// learned label embedding. Shape `[tokens, D]`.
    pub fn encode_prompt(&self, prompts: &PromptSet) -> Result<Tensor> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("empty prompt set".into()));
        }
        let size = self.cfg.image_size as f32;
        let d = self.cfg.embed_dim;
        let check = |x: f32, y: f32| -> Result<()> {
            if x < 0.0 || y < 0.0 || x > size || y > size {
                return Err(Error::InvalidArgument(format!(
                    "prompt coordinate ({x}, {y}) outside image bounds 0..{size}"
                )));
            }
            Ok(())
        };
        let mut rows: Vec<Tensor> = Vec::with_capacity(prompts.token_count());
        let emb = self.label_emb.data();
        let mut push_row = |x: f32, y: f32, label_idx: usize| {
            let mut row = position_code(d, x / size, y / size);
            for (r, e) in row.iter_mut().zip(&emb[label_idx * d..(label_idx + 1) * d]) {
                *r += e;
            }
            rows.push(Tensor::new(&[1, d], row));
        };
        for p in &prompts.points {
            check(p.x, p.y)?;
            let idx = match p.label {
                PointLabel::Positive => 0,
                PointLabel::Negative => 1,
            };
            push_row(p.x, p.y, idx);
        }
        for b in &prompts.boxes {
            check(b.x0, b.y0)?;
            check(b.x1, b.y1)?;
            if b.x0 >= b.x1 || b.y0 >= b.y1 {
                return Err(Error::InvalidArgument(format!(
                    "degenerate box ({}, {}, {}, {})",
                    b.x0, b.y0, b.x1, b.y1
                )));
            }
            push_row(b.x0, b.y0, 2);
            push_row(b.x1, b.y1, 3);
        }
        concat_rows(&rows)
    }

    // ── Decoder ──────────────────────────────────────────────────────

    pub fn decode_mask(&self, embedding: &Tensor, prompts: &PromptSet) -> Result<DecoderOutput> {
        self.decode_mask_hooked(embedding, prompts, None)
    }

    pub fn decode_mask_hooked(
        &self,
        embedding: &Tensor,
        prompts: &PromptSet,
        hook: Hook,
    ) -> Result<DecoderOutput> {
        let g = self.cfg.grid_size();
        let d = self.cfg.embed_dim;
        if embedding.shape() != [d, g, g] {
            return Err(Error::ShapeMismatch {
                op: "decode_mask",
                lhs: embedding.shape().to_vec(),
                rhs: vec![d, g, g],
            });
        }
        let k = self.cfg.num_masks;

        let prompt_rows = self.encode_prompt(prompts)?;
        let p_tok = hooked_matmul(
            hook,
            "prompt.proj",
            &prompt_rows,
            ActKind::Plain,
            &self.prompt_proj_w,
            ActKind::Weight,
        )?;
        let p_tok = add_row_vector(&p_tok, &self.prompt_proj_b)?;

        // Queries: output tokens first, then prompt tokens.
        let mut q = concat_rows(&[self.output_tokens.clone(), p_tok])?;

        let flat = reshape(embedding, &[d, g * g])?;
        let mut img = add(&transpose2d(&flat)?, &self.img_pe)?;

        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("dec.l{i}");
            let sa = self.attention(hook, &format!("{p}.self"), &q, &q, &layer.self_attn)?;
            q = layernorm(&add(&q, &sa)?, &layer.ln1.g, &layer.ln1.b, LN_EPS)?;
            let t2i = self.attention(hook, &format!("{p}.t2i"), &q, &img, &layer.t2i)?;
            q = layernorm(&add(&q, &t2i)?, &layer.ln2.g, &layer.ln2.b, LN_EPS)?;
            let m = self.mlp_forward(hook, &format!("{p}.mlp"), &layer.mlp, &q)?;
            q = layernorm(&add(&q, &m)?, &layer.ln3.g, &layer.ln3.b, LN_EPS)?;
            let i2t = self.attention(hook, &format!("{p}.i2t"), &img, &q, &layer.i2t)?;
            img = layernorm(&add(&img, &i2t)?, &layer.ln4.g, &layer.ln4.b, LN_EPS)?;
        }

        let tokens = slice_rows(&q, 0, 1 + k)?;

        let iou_in = slice_rows(&q, 0, 1)?;
        let iou_raw = self.mlp_forward(hook, "dec.iou", &self.iou_head, &iou_in)?;
        let ious = reshape(&sigmoid(&iou_raw), &[k])?;

        // Upscaled image features, then one dot product per mask token.
        let img_grid = reshape(&transpose2d(&img)?, &[d, g, g])?;
        let up = upsample2x_bilinear(&img_grid)?;
        let feat =
            hooked_conv2d(hook, "dec.upscale", &up, ActKind::Plain, &self.upscale_w, 1, 0)?;
        let feat = gelu(&add_bias_chw(&feat, &self.upscale_b)?);
        let feat_flat = reshape(&feat, &[self.cfg.mask_channels, 4 * g * g])?;

        let mut mask_rows = Vec::with_capacity(k);
        for (idx, h) in self.hyper.iter().enumerate() {
            let tok = slice_rows(&q, 1 + idx, 2 + idx)?;
            let hv = self.mlp_forward(hook, &format!("dec.hyper{idx}"), h, &tok)?;
            let row = hooked_matmul(
                hook,
                &format!("dec.mask{idx}.dot"),
                &hv,
                ActKind::Plain,
                &feat_flat,
                ActKind::PostGelu,
            )?;
            mask_rows.push(row);
        }
        let logits = reshape(&concat_rows(&mask_rows)?, &[k, 2 * g, 2 * g])?;
        let masks = upsample2x_bilinear(&logits)?;

        Ok(DecoderOutput { masks, ious, tokens })
    }

    fn attention(
        &self,
        hook: Hook,
        site: &str,
        q_in: &Tensor,
        kv_in: &Tensor,
        p: &AttentionParams,
    ) -> Result<Tensor> {
        let q = hooked_matmul(hook, &format!("{site}.q"), q_in, ActKind::Plain, &p.wq, ActKind::Weight)?;
        let k = hooked_matmul(hook, &format!("{site}.k"), kv_in, ActKind::Plain, &p.wk, ActKind::Weight)?;
        let v = hooked_matmul(hook, &format!("{site}.v"), kv_in, ActKind::Plain, &p.wv, ActKind::Weight)?;
        let kt = transpose2d(&k)?;
        let scores = hooked_matmul(hook, &format!("{site}.qk"), &q, ActKind::Plain, &kt, ActKind::Plain)?;
        let scores = crate::tensor::mul_scalar(&scores, 1.0 / (self.cfg.attn_dim as f32).sqrt());
        let probs = softmax(&scores)?;
        let ctx = hooked_matmul(
            hook,
            &format!("{site}.pv"),
            &probs,
            ActKind::PostSoftmax,
            &v,
            ActKind::Plain,
        )?;
        hooked_matmul(hook, &format!("{site}.o"), &ctx, ActKind::Plain, &p.wo, ActKind::Weight)
    }

    fn mlp_forward(&self, hook: Hook, site: &str, m: &Mlp, x: &Tensor) -> Result<Tensor> {
        let h = hooked_matmul(hook, &format!("{site}.lin1"), x, ActKind::Plain, &m.w1, ActKind::Weight)?;
        let h = gelu(&add_row_vector(&h, &m.b1)?);
        let o = hooked_matmul(hook, &format!("{site}.lin2"), &h, ActKind::PostGelu, &m.w2, ActKind::Weight)?;
        add_row_vector(&o, &m.b2)
    }

    /// Every product site in forward order, with operand activation kinds.
    pub fn quant_sites(&self, include_prompt_encoder: bool) -> Vec<QuantSite> {
        let mut out = Vec::new();
        let site = |name: String, a: ActKind, b: ActKind| QuantSite { name, a_kind: a, b_kind: b };
        for i in 0..self.enc_blocks.len() {
            let kind = if i == 0 { ActKind::Plain } else { ActKind::PostGelu };
            out.push(site(format!("enc.b{i}"), kind, ActKind::Weight));
        }
        out.push(site("enc.proj".into(), ActKind::PostGelu, ActKind::Weight));
        if include_prompt_encoder {
            out.push(site("prompt.proj".into(), ActKind::Plain, ActKind::Weight));
        }
        for i in 0..self.layers.len() {
            let p = format!("dec.l{i}");
            for tag in ["self", "t2i", "i2t"] {
                out.push(site(format!("{p}.{tag}.q"), ActKind::Plain, ActKind::Weight));
                out.push(site(format!("{p}.{tag}.k"), ActKind::Plain, ActKind::Weight));
                out.push(site(format!("{p}.{tag}.v"), ActKind::Plain, ActKind::Weight));
                out.push(site(format!("{p}.{tag}.qk"), ActKind::Plain, ActKind::Plain));
                out.push(site(format!("{p}.{tag}.pv"), ActKind::PostSoftmax, ActKind::Plain));
                out.push(site(format!("{p}.{tag}.o"), ActKind::Plain, ActKind::Weight));
                if tag == "t2i" {
                    out.push(site(format!("{p}.mlp.lin1"), ActKind::Plain, ActKind::Weight));
                    out.push(site(format!("{p}.mlp.lin2"), ActKind::PostGelu, ActKind::Weight));
                }
            }
        }
        out.push(site("dec.iou.lin1".into(), ActKind::Plain, ActKind::Weight));
        out.push(site("dec.iou.lin2".into(), ActKind::PostGelu, ActKind::Weight));
        out.push(site("dec.upscale".into(), ActKind::Plain, ActKind::Weight));
        for k in 0..self.cfg.num_masks {
            out.push(site(format!("dec.hyper{k}.lin1"), ActKind::Plain, ActKind::Weight));
            out.push(site(format!("dec.hyper{k}.lin2"), ActKind::PostGelu, ActKind::Weight));
            out.push(site(format!("dec.mask{k}.dot"), ActKind::Plain, ActKind::PostGelu));
        }
        out
    }

    /// Weight tensor for sites whose B operand is a fixed parameter.
    pub fn site_weight(&self, site: &str) -> Option<&Tensor> {
        if let Some(rest) = site.strip_prefix("enc.b") {
            let idx: usize = rest.parse().ok()?;
            return Some(&self.enc_blocks.get(idx)?.w);
        }
        match site {
            "enc.proj" => return Some(&self.enc_proj_w),
            "prompt.proj" => return Some(&self.prompt_proj_w),
            "dec.iou.lin1" => return Some(&self.iou_head.w1),
            "dec.iou.lin2" => return Some(&self.iou_head.w2),
            "dec.upscale" => return Some(&self.upscale_w),
            _ => {}
        }
        if let Some(rest) = site.strip_prefix("dec.hyper") {
            let (k, tail) = rest.split_once('.')?;
            let h = self.hyper.get(k.parse::<usize>().ok()?)?;
            return match tail {
                "lin1" => Some(&h.w1),
                "lin2" => Some(&h.w2),
                _ => None,
            };
        }
        if let Some(rest) = site.strip_prefix("dec.l") {
            let (i, tail) = rest.split_once('.')?;
            let layer = self.layers.get(i.parse::<usize>().ok()?)?;
            let (block, mat) = tail.split_once('.')?;
            let attn = match block {
                "self" => Some(&layer.self_attn),
                "t2i" => Some(&layer.t2i),
                "i2t" => Some(&layer.i2t),
                "mlp" => {
                    return match mat {
                        "lin1" => Some(&layer.mlp.w1),
                        "lin2" => Some(&layer.mlp.w2),
                        _ => None,
                    }
                }
                _ => None,
            }?;
            return match mat {
                "q" => Some(&attn.wq),
                "k" => Some(&attn.wk),
                "v" => Some(&attn.wv),
                "o" => Some(&attn.wo),
                _ => None,
            };
        }
        None
    }
}

/// Channelwise layer norm for `[C, H, W]`: normalize across C per position.
fn layernorm_chw(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "layernorm_chw",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            })
        }
    };
    let flat = reshape(x, &[c, h * w])?;
    let rows = transpose2d(&flat)?; // [HW, C]
    let normed = layernorm(&rows, gamma, beta, LN_EPS)?;
    reshape(&transpose2d(&normed)?, &[c, h, w])
}

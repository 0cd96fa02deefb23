//! Post-training quantization: uniform symmetric fake quantization, a
//! task-loss-guided alternating grid search for scale factors, and two-group
//! split quantization for post-softmax / post-GELU activations.
//!
//! Calibration is sequential in forward order: while a site's scales are
//! searched, every earlier site is frozen in its quantized form and every
//! later site stays float. The search metric is the end-to-end KL task loss
//! between the float model and the candidate-quantized model on a small
//! calibration batch.

use crate::container::Container;
use crate::data::TrainSample;
use crate::error::{Error, Result};
use crate::eval::next_eval_point;
use crate::model::{ActKind, Image, MatHook, OperandRole, PromptSet, SegModel};
use crate::tensor::{no_grad, Tensor};
use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

// ── Uniform symmetric quantization (element level) ───────────────────

fn check_bits_scale(bits: u32, scale: f32) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits must be in 2..=32, got {bits}")));
    }
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    Ok(())
}

fn qmin(bits: u32) -> i64 {
    -(1i64 << (bits - 1))
}

fn qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// `clip(round(x/s), -2^(b-1), 2^(b-1)-1)` with round-half-to-even.
pub fn quantize_tensor(x: &[f32], bits: u32, scale: f32) -> Result<Vec<i64>> {
    check_bits_scale(bits, scale)?;
    let (lo, hi) = (qmin(bits), qmax(bits));
    Ok(x.iter()
        .map(|&v| {
            let r = (v as f64 / scale as f64).round_ties_even();
            (r as i64).clamp(lo, hi)
        })
        .collect())
}

pub fn dequantize(x_q: &[i64], scale: f32) -> Vec<f32> {
    x_q.iter().map(|&q| (q as f64 * scale as f64) as f32).collect()
}

/// Quantize-then-dequantize with a single scale.
pub fn fake_quantize(x: &[f32], bits: u32, scale: f32) -> Result<Vec<f32>> {
    Ok(dequantize(&quantize_tensor(x, bits, scale)?, scale))
}

// ── Schemes ──────────────────────────────────────────────────────────

/// Per-tensor quantization recipe: one scale, or two scales split at a
/// threshold (elements strictly below the threshold use the low scale).
#[derive(Debug, Clone, PartialEq)]
pub enum SchemeKind {
    Single { scale: f32 },
    Split { threshold: f32, below_scale: f32, above_scale: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    pub bits: u32,
    pub kind: SchemeKind,
}

impl QuantScheme {
    pub fn single(bits: u32, scale: f32) -> QuantScheme {
        QuantScheme { bits, kind: SchemeKind::Single { scale } }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SchemeKind::Single { scale } => check_bits_scale(self.bits, scale),
            SchemeKind::Split { below_scale, above_scale, .. } => {
                check_bits_scale(self.bits, below_scale)?;
                check_bits_scale(self.bits, above_scale)
            }
        }
    }

    /// Fake-quantize a buffer under this scheme.
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let (lo, hi) = (qmin(self.bits), qmax(self.bits));
        let fq = |v: f32, s: f32| -> f32 {
            let r = (v as f64 / s as f64).round_ties_even();
            let q = (r as i64).clamp(lo, hi);
            (q as f64 * s as f64) as f32
        };
        match self.kind {
            SchemeKind::Single { scale } => x.iter().map(|&v| fq(v, scale)).collect(),
            SchemeKind::Split { threshold, below_scale, above_scale } => x
                .iter()
                .map(|&v| if v < threshold { fq(v, below_scale) } else { fq(v, above_scale) })
                .collect(),
        }
    }

    fn encode(&self) -> Vec<f32> {
        match self.kind {
            SchemeKind::Single { scale } => vec![0.0, self.bits as f32, scale],
            SchemeKind::Split { threshold, below_scale, above_scale } => {
                vec![1.0, self.bits as f32, threshold, below_scale, above_scale]
            }
        }
    }

    fn decode(data: &[f32]) -> Result<QuantScheme> {
        match data {
            [code, bits, scale] if *code == 0.0 => Ok(QuantScheme::single(*bits as u32, *scale)),
            [code, bits, t, lo, hi] if *code == 1.0 => Ok(QuantScheme {
                bits: *bits as u32,
                kind: SchemeKind::Split { threshold: *t, below_scale: *lo, above_scale: *hi },
            }),
            _ => Err(Error::Format("malformed quant scheme record".into())),
        }
    }

    fn describe(&self) -> String {
        match self.kind {
            SchemeKind::Single { scale } => format!("{scale:.6e}"),
            SchemeKind::Split { threshold, below_scale, above_scale } => {
                format!("{below_scale:.6e}/{above_scale:.6e}@{threshold:.6e}")
            }
        }
    }
}

/// Search hyperparameters (range factors are relative to max/2^(b-1)).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSearchConfig {
    pub range_lo: f32,
    pub range_hi: f32,
    pub candidates: usize,
    pub rounds: usize,
    pub calibration_size: usize,
    pub quantize_prompt_encoder: bool,
}

impl Default for QuantSearchConfig {
    fn default() -> Self {
        QuantSearchConfig {
            range_lo: 0.01,
            range_hi: 1.2,
            candidates: 100,
            rounds: 3,
            calibration_size: 8,
            quantize_prompt_encoder: true,
        }
    }
}

impl QuantSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_lo > 0.0 && self.range_lo < self.range_hi) {
            return Err(Error::InvalidArgument(
                "need 0 < range_lo < range_hi for the scale search".into(),
            ));
        }
        if self.candidates < 2 {
            return Err(Error::InvalidArgument("need at least 2 scale candidates".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("need at least 1 search round".into()));
        }
        Ok(())
    }
}

// ── Alternating grid search ──────────────────────────────────────────

fn linspace(lo: f32, hi: f32, n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32).collect()
}

fn max_abs(vals: &[f32]) -> f32 {
    vals.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
}

#[derive(Debug, Clone, Copy)]
pub struct SearchedScales {
    pub s_a: f32,
    pub s_b: f32,
    pub metric: f64,
    pub baseline_metric: f64,
}

/// Alternating coordinate descent over the two scale grids: fix one scale,
/// scan the other over its candidates, adopt the scan minimum, repeat for
/// `rounds` rounds starting from the max-calibration baseline pair. The best
/// pure-grid pair visited is returned, with the baseline pair as a floor, so
/// the result is never worse than the baseline and non-increasing across
/// rounds. Ties break toward the smaller scale (scan order).
pub fn search_scales(
    layer: &str,
    a_max: f32,
    b_max: f32,
    bits: u32,
    cfg: &QuantSearchConfig,
    mut metric: impl FnMut(f32, f32) -> f64,
) -> Result<SearchedScales> {
    cfg.validate()?;
    if a_max <= 0.0 || b_max <= 0.0 {
        return Err(Error::DegenerateLayer { layer: layer.to_string() });
    }
    let denom = (1i64 << (bits - 1)) as f32;
    let base_a = a_max / denom;
    let base_b = b_max / denom;
    let grid_a = linspace(cfg.range_lo * base_a, cfg.range_hi * base_a, cfg.candidates);
    let grid_b = linspace(cfg.range_lo * base_b, cfg.range_hi * base_b, cfg.candidates);

    let baseline = metric(base_a, base_b);
    let (mut cur_a, mut cur_b) = (base_a, base_b);
    // Best pair whose coordinates both come from the grids.
    let mut best: Option<SearchedScales> = None;
    for round in 0..cfg.rounds {
        let mut scan_best = (grid_a[0], f64::INFINITY);
        for &s_a in &grid_a {
            let m = metric(s_a, cur_b);
            if m < scan_best.1 {
                scan_best = (s_a, m);
            }
        }
        cur_a = scan_best.0;
        if round > 0 && best.as_ref().map_or(false, |b| scan_best.1 < b.metric) {
            best = Some(SearchedScales {
                s_a: cur_a,
                s_b: cur_b,
                metric: scan_best.1,
                baseline_metric: baseline,
            });
        }
        let mut scan_best = (grid_b[0], f64::INFINITY);
        for &s_b in &grid_b {
            let m = metric(cur_a, s_b);
            if m < scan_best.1 {
                scan_best = (s_b, m);
            }
        }
        cur_b = scan_best.0;
        if best.as_ref().map_or(true, |b| scan_best.1 < b.metric) {
            best = Some(SearchedScales {
                s_a: cur_a,
                s_b: cur_b,
                metric: scan_best.1,
                baseline_metric: baseline,
            });
        }
    }
    let best = best.expect("at least one full scan ran");
    if best.metric <= baseline {
        Ok(best)
    } else {
        Ok(SearchedScales { s_a: base_a, s_b: base_b, metric: baseline, baseline_metric: baseline })
    }
}

/// Search one operand's grid with the other operand's scheme fixed.
fn search_single_scale(
    layer: &str,
    v_max: f32,
    bits: u32,
    cfg: &QuantSearchConfig,
    mut metric: impl FnMut(f32) -> f64,
) -> Result<(f32, f64, f64)> {
    cfg.validate()?;
    if v_max <= 0.0 {
        return Err(Error::DegenerateLayer { layer: layer.to_string() });
    }
    let base = v_max / (1i64 << (bits - 1)) as f32;
    let baseline = metric(base);
    let mut best = (base, baseline);
    for s in linspace(cfg.range_lo * base, cfg.range_hi * base, cfg.candidates) {
        let m = metric(s);
        if m < best.1 {
            best = (s, m);
        }
    }
    Ok((best.0, best.1, baseline))
}

/// Convenience wrapper for a standalone matmul layer: the metric is the MSE
/// between the float product and the fake-quantized product.
pub fn search_scales_matmul(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    bits: u32,
    cfg: &QuantSearchConfig,
) -> Result<SearchedScales> {
    let float = crate::reference::matmul_f64(a, b, m, k, n);
    let metric = |s_a: f32, s_b: f32| matmul_quant_mse(a, b, m, k, n, bits, s_a, s_b, &float);
    search_scales("matmul", max_abs(a), max_abs(b), bits, cfg, metric)
}

pub(crate) fn matmul_quant_mse(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    bits: u32,
    s_a: f32,
    s_b: f32,
    float: &[f64],
) -> f64 {
    let aq = QuantScheme::single(bits, s_a).apply(a);
    let bq = QuantScheme::single(bits, s_b).apply(b);
    let prod = crate::reference::matmul_f64(&aq, &bq, m, k, n);
    prod.iter().zip(float).map(|(p, f)| (p - f).powi(2)).sum::<f64>() / float.len() as f64
}

// ── Split schemes ────────────────────────────────────────────────────

fn group_mse(vals: &[f32], bits: u32, scale: f32) -> f64 {
    let back = QuantScheme::single(bits, scale).apply(vals);
    vals.iter().zip(&back).map(|(&v, &b)| ((v - b) as f64).powi(2)).sum()
}

/// Best single scale for a value group by quantization MSE over the grid
/// (baseline max-scale included). None for an all-zero group.
fn scale_for_group(vals: &[f32], bits: u32, cfg: &QuantSearchConfig) -> Option<(f32, f64)> {
    let v_max = max_abs(vals);
    if v_max == 0.0 {
        return None;
    }
    let base = v_max / (1i64 << (bits - 1)) as f32;
    let mut best = (base, group_mse(vals, bits, base));
    for s in linspace(cfg.range_lo * base, cfg.range_hi * base, cfg.candidates) {
        let m = group_mse(vals, bits, s);
        if m < best.1 {
            best = (s, m);
        }
    }
    Some(best)
}

/// Two-group split for non-uniform activations. GELU splits at zero
/// (negative / nonnegative); softmax picks its threshold from a small
/// candidate set by total quantization MSE. An empty group falls back to the
/// global single scale.
pub fn split_scheme(
    kind: ActKind,
    samples: &[f32],
    bits: u32,
    cfg: &QuantSearchConfig,
) -> Result<QuantScheme> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("split_scheme needs calibration samples".into()));
    }
    let global = scale_for_group(samples, bits, cfg)
        .ok_or_else(|| Error::DegenerateLayer { layer: format!("split:{}", kind.as_str()) })?;

    let build = |threshold: f32| -> (QuantScheme, f64) {
        let below: Vec<f32> = samples.iter().copied().filter(|&v| v < threshold).collect();
        let above: Vec<f32> = samples.iter().copied().filter(|&v| v >= threshold).collect();
        let (s_lo, m_lo) = scale_for_group(&below, bits, cfg).unwrap_or((global.0, 0.0));
        let (s_hi, m_hi) = scale_for_group(&above, bits, cfg).unwrap_or((global.0, 0.0));
        (
            QuantScheme {
                bits,
                kind: SchemeKind::Split { threshold, below_scale: s_lo, above_scale: s_hi },
            },
            m_lo + m_hi,
        )
    };

    match kind {
        ActKind::PostGelu => Ok(build(0.0).0),
        ActKind::PostSoftmax => {
            let denom = (1u64 << bits) as f32;
            let mut best: Option<(QuantScheme, f64)> = None;
            for mult in [1.0f32, 2.0, 4.0, 8.0] {
                let (scheme, mse) = build(mult / denom);
                if best.as_ref().map_or(true, |(_, m)| mse < *m) {
                    best = Some((scheme, mse));
                }
            }
            Ok(best.unwrap().0)
        }
        other => Err(Error::InvalidArgument(format!(
            "split_scheme applies to post-softmax/post-gelu activations, not {}",
            other.as_str()
        ))),
    }
}

// ── Quantized model ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SitePair {
    pub a: QuantScheme,
    pub b: QuantScheme,
}

/// Site name → operand schemes; acts as the forward hook that fake-quantizes
/// both operands of every covered product.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantMap {
    schemes: HashMap<String, SitePair>,
}

impl QuantMap {
    pub fn insert(&mut self, site: impl Into<String>, pair: SitePair) {
        self.schemes.insert(site.into(), pair);
    }

    pub fn get(&self, site: &str) -> Option<&SitePair> {
        self.schemes.get(site)
    }

    pub fn len(&self) -> usize {
        self.schemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemes.is_empty()
    }
}

impl MatHook for QuantMap {
    fn transform(&self, site: &str, role: OperandRole, _kind: ActKind, t: &Tensor) -> Option<Tensor> {
        let pair = self.schemes.get(site)?;
        let scheme = match role {
            OperandRole::A => &pair.a,
            OperandRole::B => &pair.b,
        };
        Some(Tensor::new(t.shape(), scheme.apply(t.data())))
    }
}

/// Overrides one site's schemes on top of a frozen map; used while scanning
/// scale candidates for that site.
struct CandidateHook<'a> {
    frozen: &'a QuantMap,
    site: &'a str,
    pair: RefCell<SitePair>,
}

impl MatHook for CandidateHook<'_> {
    fn transform(&self, site: &str, role: OperandRole, kind: ActKind, t: &Tensor) -> Option<Tensor> {
        if site == self.site {
            let pair = self.pair.borrow();
            let scheme = match role {
                OperandRole::A => &pair.a,
                OperandRole::B => &pair.b,
            };
            Some(Tensor::new(t.shape(), scheme.apply(t.data())))
        } else {
            self.frozen.transform(site, role, kind, t)
        }
    }
}

/// A float model paired with per-site quantization schemes. The forward pass
/// stays in floats (quantize-then-dequantize at every covered product).
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub base: SegModel,
    pub map: QuantMap,
    pub bits: u32,
}

impl QuantizedModel {
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        self.base.encode_image_hooked(image, Some(&self.map))
    }

    pub fn decode_mask(
        &self,
        emb: &Tensor,
        prompts: &PromptSet,
    ) -> Result<crate::model::DecoderOutput> {
        self.base.decode_mask_hooked(emb, prompts, Some(&self.map))
    }
}

// ── Task loss (KL between float and quantized outputs) ───────────────

const KL_CLAMP: f64 = 1e-6;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(KL_CLAMP, 1.0 - KL_CLAMP)
}

fn softmax_f64_clamped(vals: &[f32]) -> Vec<f64> {
    let soft = crate::reference::softmax_f64(vals);
    let clamped: Vec<f64> = soft.iter().map(|&p| p.max(KL_CLAMP)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.iter().map(|p| p / total).collect()
}

/// One prompt per calibration image: the center of its first object mask.
pub fn calibration_batch(samples: &[TrainSample], size: usize) -> Result<Vec<(Image, PromptSet)>> {
    if samples.is_empty() || size == 0 {
        return Err(Error::InvalidArgument("calibration set must be nonempty".into()));
    }
    samples
        .iter()
        .take(size)
        .map(|s| {
            let gt = &s.gt_masks[0];
            let empty = crate::data::Mask::empty(gt.width, gt.height);
            let p = next_eval_point(gt, &empty)?.expect("nonempty gt mask yields a prompt point");
            Ok((s.image.clone(), PromptSet { points: vec![p], boxes: vec![] }))
        })
        .collect()
}

/// Cached float-model outputs for the calibration batch.
struct FloatRef {
    mask_probs: Vec<Vec<f64>>,
    iou_dists: Vec<Vec<f64>>,
}

fn float_reference(model: &SegModel, batch: &[(Image, PromptSet)]) -> Result<FloatRef> {
    let mut mask_probs = Vec::with_capacity(batch.len());
    let mut iou_dists = Vec::with_capacity(batch.len());
    no_grad(|| -> Result<()> {
        for (image, prompts) in batch {
            let emb = model.encode_image(image)?;
            let out = model.decode_mask(&emb, prompts)?;
            mask_probs.push(
                out.masks
                    .data()
                    .iter()
                    .map(|&z| clamp_prob(crate::reference::sigmoid_f64(z as f64)))
                    .collect(),
            );
            iou_dists.push(softmax_f64_clamped(out.ious.data()));
        }
        Ok(())
    })?;
    Ok(FloatRef { mask_probs, iou_dists })
}

/// Mean Bernoulli KL between per-pixel mask distributions: quantized
/// probabilities (from logits) against clamped float probabilities.
pub fn bernoulli_kl_mean(quant_logits: &[f32], float_probs: &[f64]) -> f64 {
    debug_assert_eq!(quant_logits.len(), float_probs.len());
    let total: f64 = quant_logits
        .iter()
        .zip(float_probs)
        .map(|(&z, &pf)| {
            let pq = clamp_prob(crate::reference::sigmoid_f64(z as f64));
            pq * (pq / pf).ln() + (1.0 - pq) * ((1.0 - pq) / (1.0 - pf)).ln()
        })
        .sum();
    total / quant_logits.len().max(1) as f64
}

fn task_loss_against_ref(
    base: &SegModel,
    hook: &dyn MatHook,
    batch: &[(Image, PromptSet)],
    float: &FloatRef,
    enc_cache: Option<&[Tensor]>,
) -> Result<f64> {
    let mut mask_kl = 0.0f64;
    let mut iou_kl = 0.0f64;
    no_grad(|| -> Result<()> {
        for (i, (image, prompts)) in batch.iter().enumerate() {
            let emb = match enc_cache {
                Some(cache) => cache[i].clone(),
                None => base.encode_image_hooked(image, Some(hook))?,
            };
            let out = base.decode_mask_hooked(&emb, prompts, Some(hook))?;
            mask_kl += bernoulli_kl_mean(out.masks.data(), &float.mask_probs[i]);
            let dq = softmax_f64_clamped(out.ious.data());
            iou_kl += crate::reference::discrete_kl(&dq, &float.iou_dists[i]);
        }
        Ok(())
    })?;
    Ok((mask_kl + iou_kl) / batch.len() as f64)
}

/// End-to-end KL task loss between a float model and a quantized model on a
/// calibration batch: per-pixel Bernoulli KL of the mask outputs (averaged
/// over pixels and prompts) plus KL between softmax-normalized IoU
/// predictions, quantized distribution first.
pub fn task_loss(
    model_float: &SegModel,
    model_quant: &QuantizedModel,
    batch: &[(Image, PromptSet)],
) -> Result<f64> {
    let float = float_reference(model_float, batch)?;
    task_loss_against_ref(&model_quant.base, &model_quant.map, batch, &float, None)
}

// ── Whole-model calibration ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub layer: String,
    pub bits: u32,
    pub s_a: String,
    pub s_b: String,
    pub metric_before: f64,
    pub metric_after: f64,
}

#[derive(Debug, Clone, Default)]
pub struct QuantReport {
    pub rows: Vec<ReportRow>,
    pub final_task_loss: f64,
}

impl QuantReport {
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "layer={} bits={} s_a={} s_b={} metric_before={:.6e} metric_after={:.6e}",
                r.layer, r.bits, r.s_a, r.s_b, r.metric_before, r.metric_after
            );
        }
        let _ = writeln!(s, "final_task_loss={:.6e}", self.final_task_loss);
        s
    }
}

/// Collects per-site operand values over the calibration forward passes.
struct ActivationRecorder {
    samples: RefCell<HashMap<(String, OperandRole), Vec<f32>>>,
}

impl MatHook for ActivationRecorder {
    fn transform(&self, site: &str, role: OperandRole, _kind: ActKind, t: &Tensor) -> Option<Tensor> {
        self.samples
            .borrow_mut()
            .entry((site.to_string(), role))
            .or_default()
            .extend_from_slice(t.data());
        None
    }
}

/// Calibrate every product site of `model`, input to output. Post-softmax
/// and post-GELU operands get split schemes (fit by quantization MSE);
/// everything else gets task-loss grid-searched scales. Returns the
/// quantized model plus a per-layer report.
pub fn quantize_model(
    model: &SegModel,
    calib: &[TrainSample],
    bits: u32,
    cfg: &QuantSearchConfig,
) -> Result<(QuantizedModel, QuantReport)> {
    cfg.validate()?;
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits must be in 2..=32, got {bits}")));
    }
    let batch = calibration_batch(calib, cfg.calibration_size)?;
    let float = float_reference(model, &batch)?;

    // Operand ranges from one float pass over the batch.
    let recorder = ActivationRecorder { samples: RefCell::new(HashMap::new()) };
    no_grad(|| -> Result<()> {
        for (image, prompts) in &batch {
            let emb = model.encode_image_hooked(image, Some(&recorder))?;
            model.decode_mask_hooked(&emb, prompts, Some(&recorder))?;
        }
        Ok(())
    })?;
    let activations = recorder.samples.into_inner();

    let sites = model.quant_sites(cfg.quantize_prompt_encoder);
    let mut map = QuantMap::default();
    let mut report = QuantReport::default();
    // Embeddings under the frozen quantized encoder, reused for decoder sites.
    let mut enc_cache: Option<Vec<Tensor>> = None;

    for site in &sites {
        let is_encoder = site.name.starts_with("enc.");
        if !is_encoder && enc_cache.is_none() {
            let mut cache = Vec::with_capacity(batch.len());
            no_grad(|| -> Result<()> {
                for (image, _) in &batch {
                    cache.push(model.encode_image_hooked(image, Some(&map))?);
                }
                Ok(())
            })?;
            enc_cache = Some(cache);
        }
        let cache = if is_encoder { None } else { enc_cache.as_deref() };

        let operand = |role: OperandRole| -> Result<Vec<f32>> {
            if role == OperandRole::B {
                if let Some(w) = model.site_weight(&site.name) {
                    return Ok(w.data().to_vec());
                }
            }
            activations
                .get(&(site.name.clone(), role))
                .cloned()
                .ok_or_else(|| Error::Format(format!("no recorded operand for {}", site.name)))
        };
        let a_vals = operand(OperandRole::A)?;
        let b_vals = operand(OperandRole::B)?;

        let metric_before = task_loss_against_ref(model, &map, &batch, &float, cache)?;

        let eval_pair = |pair: SitePair| -> f64 {
            let hook = CandidateHook { frozen: &map, site: &site.name, pair: RefCell::new(pair) };
            task_loss_against_ref(model, &hook, &batch, &float, cache).unwrap_or(f64::INFINITY)
        };

        let (pair, metric_after) = match (site.a_kind, site.b_kind) {
            (a_kind @ (ActKind::PostSoftmax | ActKind::PostGelu), _) => {
                let a_scheme = split_scheme(a_kind, &a_vals, bits, cfg)?;
                let (s_b, m, _) =
                    search_single_scale(&site.name, max_abs(&b_vals), bits, cfg, |s| {
                        eval_pair(SitePair { a: a_scheme.clone(), b: QuantScheme::single(bits, s) })
                    })?;
                (SitePair { a: a_scheme, b: QuantScheme::single(bits, s_b) }, m)
            }
            (_, b_kind @ (ActKind::PostSoftmax | ActKind::PostGelu)) => {
                let b_scheme = split_scheme(b_kind, &b_vals, bits, cfg)?;
                let (s_a, m, _) =
                    search_single_scale(&site.name, max_abs(&a_vals), bits, cfg, |s| {
                        eval_pair(SitePair { a: QuantScheme::single(bits, s), b: b_scheme.clone() })
                    })?;
                (SitePair { a: QuantScheme::single(bits, s_a), b: b_scheme }, m)
            }
            _ => {
                let searched = search_scales(
                    &site.name,
                    max_abs(&a_vals),
                    max_abs(&b_vals),
                    bits,
                    cfg,
                    |s_a, s_b| {
                        eval_pair(SitePair {
                            a: QuantScheme::single(bits, s_a),
                            b: QuantScheme::single(bits, s_b),
                        })
                    },
                )?;
                (
                    SitePair {
                        a: QuantScheme::single(bits, searched.s_a),
                        b: QuantScheme::single(bits, searched.s_b),
                    },
                    searched.metric,
                )
            }
        };

        report.rows.push(ReportRow {
            layer: site.name.clone(),
            bits,
            s_a: pair.a.describe(),
            s_b: pair.b.describe(),
            metric_before,
            metric_after,
        });
        map.insert(site.name.clone(), pair);
    }

    let quantized = QuantizedModel { base: model.clone(), map, bits };
    report.final_task_loss = task_loss(model, &quantized, &batch)?;
    Ok((quantized, report))
}

/// Naive max-calibration quantization (baseline scales, no search).
pub fn quantize_model_naive(
    model: &SegModel,
    calib: &[TrainSample],
    bits: u32,
    cfg: &QuantSearchConfig,
) -> Result<QuantizedModel> {
    let batch = calibration_batch(calib, cfg.calibration_size)?;
    let recorder = ActivationRecorder { samples: RefCell::new(HashMap::new()) };
    no_grad(|| -> Result<()> {
        for (image, prompts) in &batch {
            let emb = model.encode_image_hooked(image, Some(&recorder))?;
            model.decode_mask_hooked(&emb, prompts, Some(&recorder))?;
        }
        Ok(())
    })?;
    let activations = recorder.samples.into_inner();
    let denom = (1i64 << (bits - 1)) as f32;
    let mut map = QuantMap::default();
    for site in model.quant_sites(cfg.quantize_prompt_encoder) {
        let operand_max = |role: OperandRole| -> Result<f32> {
            if role == OperandRole::B {
                if let Some(w) = model.site_weight(&site.name) {
                    return Ok(max_abs(w.data()));
                }
            }
            activations
                .get(&(site.name.clone(), role))
                .map(|v| max_abs(v))
                .ok_or_else(|| Error::Format(format!("no recorded operand for {}", site.name)))
        };
        let a_max = operand_max(OperandRole::A)?;
        let b_max = operand_max(OperandRole::B)?;
        if a_max == 0.0 || b_max == 0.0 {
            return Err(Error::DegenerateLayer { layer: site.name });
        }
        map.insert(
            site.name.clone(),
            SitePair {
                a: QuantScheme::single(bits, a_max / denom),
                b: QuantScheme::single(bits, b_max / denom),
            },
        );
    }
    Ok(QuantizedModel { base: model.clone(), map, bits })
}

// ── Scheme file IO ───────────────────────────────────────────────────

pub fn save_scheme(path: impl AsRef<Path>, quantized: &QuantizedModel) -> Result<()> {
    let mut names: Vec<&String> = quantized.map.schemes.keys().collect();
    names.sort();
    let mut c = Container::new(format!(
        "kind=quant_scheme\nbits={}\nsites={}\n",
        quantized.bits,
        names.len()
    ));
    for name in names {
        let pair = &quantized.map.schemes[name];
        let a = pair.a.encode();
        let b = pair.b.encode();
        c.push(format!("{name}.a"), &[a.len()], a);
        c.push(format!("{name}.b"), &[b.len()], b);
    }
    c.write_to(path)
}

pub fn load_scheme(path: impl AsRef<Path>, base: SegModel) -> Result<QuantizedModel> {
    let c = Container::read_from(path)?;
    if c.config_value("kind") != Some("quant_scheme") {
        return Err(Error::Format("container is not a quant scheme".into()));
    }
    let bits: u32 = c
        .config_value("bits")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("quant scheme missing bits".into()))?;
    let mut map = QuantMap::default();
    for rec in &c.tensors {
        let Some(site) = rec.name.strip_suffix(".a") else { continue };
        let b_rec = c.require(&format!("{site}.b"))?;
        map.insert(
            site.to_string(),
            SitePair { a: QuantScheme::decode(&rec.data)?, b: QuantScheme::decode(&b_rec.data)? },
        );
    }
    Ok(QuantizedModel { base, map, bits })
}

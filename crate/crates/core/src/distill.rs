//! Teacher-to-student distillation with hard mask weighting and hard prompt
//! sampling, plus the plain ground-truth training loop used for the teacher.
//!
//! The student is supervised at three depths — image embedding, decoder
//! output tokens, and final mask/IoU outputs — on top of the usual
//! focal+dice+IoU ground-truth loss. Per-mask output losses are scaled by a
//! hardness weight derived from the teacher/student IoU gap, and prompts are
//! resampled from the region the current student prediction misses.

use crate::container::Container;
use crate::data::{Mask, TrainSample};
use crate::error::{Error, Result};
use crate::eval::{best_mask_binary, iou};
use crate::model::{DecoderOutput, PointLabel, PromptPoint, PromptSet, SegModel};
use crate::rng::sub_rng;
use crate::tensor::{
    l1_loss, no_grad, optim::Adam, reshape, slice_rows, weighted_sum, Tape, Tensor,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// How per-mask output losses are aggregated in the weighted distill sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputReduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// Weights of the embedding / token / output distillation terms.
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    /// Stabilizer in the hardness ratio denominator.
    pub epsilon: f32,
    pub prompts_per_iter: usize,
    /// Prompt resampling depth is drawn uniformly from 0..=max_sampling_round.
    pub max_sampling_round: usize,
    pub focal_weight: f32,
    pub dice_weight: f32,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    /// Hard mask weighting; when off every hardness weight is 1.
    pub hardness_enabled: bool,
    pub output_reduction: OutputReduction,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
            prompts_per_iter: 64,
            max_sampling_round: 9,
            focal_weight: 20.0,
            dice_weight: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            epochs: 8,
            lr: 1e-3,
            seed: 0,
            hardness_enabled: true,
            output_reduction: OutputReduction::Mean,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        if self.prompts_per_iter == 0 {
            return Err(Error::InvalidArgument("prompts_per_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// Ground-truth-only training (no distillation terms).
    pub fn gt_only(mut self) -> Self {
        self.alpha = 0.0;
        self.beta = 0.0;
        self.gamma = 0.0;
        self
    }
}

// ── Distillation losses ──────────────────────────────────────────────

/// Mean l1 distance between teacher and student image embeddings.
pub fn embedding_loss(teacher_emb: &Tensor, student_emb: &Tensor) -> Result<Tensor> {
    l1_loss(student_emb, teacher_emb)
}

/// Mean l1 distance between teacher and student output tokens.
pub fn token_loss(teacher_out: &DecoderOutput, student_out: &DecoderOutput) -> Result<Tensor> {
    l1_loss(&student_out.tokens, &teacher_out.tokens)
}

/// Mean l1 distance over the concatenation of mask logits and predicted IoUs.
pub fn output_loss(teacher_out: &DecoderOutput, student_out: &DecoderOutput) -> Result<Tensor> {
    let masks = l1_loss(&student_out.masks, &teacher_out.masks)?;
    let ious = l1_loss(&student_out.ious, &teacher_out.ious)?;
    let n_m = teacher_out.masks.numel() as f32;
    let n_i = teacher_out.ious.numel() as f32;
    Ok(weighted_sum(&[(masks, n_m / (n_m + n_i)), (ious, n_i / (n_m + n_i))]))
}

/// Hardness of a mask: sigmoid of the teacher/student IoU ratio minus one.
/// 0.5 when both match the ground truth equally well; larger when the
/// student lags the teacher.
pub fn mask_hardness(
    teacher_mask: &Mask,
    student_mask: &Mask,
    gt_mask: &Mask,
    epsilon: f32,
) -> Result<f32> {
    let iou_t = iou(teacher_mask, gt_mask)?;
    let iou_s = iou(student_mask, gt_mask)?;
    let ratio = iou_t / (iou_s + epsilon);
    let h = 1.0 / (1.0 + (-(ratio - 1.0)).exp());
    Ok(h.clamp(f32::MIN_POSITIVE, 0.999_999_94))
}

/// Weighted distillation total: `alpha*emb + beta*token + gamma*red(H_i * out_i)`.
pub fn distill_loss(
    embedding: &Tensor,
    token: &Tensor,
    output_per_mask: &[Tensor],
    hardness: &[f32],
    cfg: &DistillConfig,
) -> Result<Tensor> {
    if output_per_mask.len() != hardness.len() {
        return Err(Error::InvalidArgument(format!(
            "{} output losses but {} hardness weights",
            output_per_mask.len(),
            hardness.len()
        )));
    }
    let norm = match cfg.output_reduction {
        OutputReduction::Sum => 1.0,
        OutputReduction::Mean => 1.0 / output_per_mask.len().max(1) as f32,
    };
    let mut terms: Vec<(Tensor, f32)> =
        vec![(embedding.clone(), cfg.alpha), (token.clone(), cfg.beta)];
    for (l, &h) in output_per_mask.iter().zip(hardness) {
        terms.push((l.clone(), cfg.gamma * h * norm));
    }
    Ok(weighted_sum(&terms))
}

/// Ground-truth loss on the best mask channel: weighted focal + dice plus an
/// l1 between the predicted IoU and the actual IoU of the binarized mask.
pub fn gt_loss(student_out: &DecoderOutput, gt_mask: &Mask, cfg: &DistillConfig) -> Result<Tensor> {
    if gt_mask.is_empty() {
        return Err(Error::InvalidArgument("gt mask is empty".into()));
    }
    let (k, _) = crate::model::select_best_mask(student_out);
    let shape = student_out.masks.shape();
    let (h, w) = (shape[1], shape[2]);
    if h != gt_mask.height || w != gt_mask.width {
        return Err(Error::ShapeMismatch {
            op: "gt_loss",
            lhs: shape.to_vec(),
            rhs: vec![gt_mask.height, gt_mask.width],
        });
    }
    let logits = reshape(
        &crate::tensor::slice_channel(&student_out.masks, k)?,
        &[h * w],
    )?;
    let target = gt_mask.as_f32();
    let focal = crate::tensor::focal_loss(&logits, &target, cfg.focal_alpha, cfg.focal_gamma)?;
    let dice = crate::tensor::soft_dice_loss(&logits, &target)?;

    let pred_bin = Mask::from_logits(logits.data(), w, h, 0.0);
    let actual_iou = iou(&pred_bin, gt_mask)?;
    let iou_col = reshape(&student_out.ious, &[student_out.ious.numel(), 1])?;
    let iou_pred = slice_rows(&iou_col, k, k + 1)?;
    let iou_term = l1_loss(&iou_pred, &Tensor::new(&[1, 1], vec![actual_iou]))?;

    Ok(weighted_sum(&[
        (focal, cfg.focal_weight),
        (dice, cfg.dice_weight),
        (iou_term, 1.0),
    ]))
}

// ── Hard prompt sampling ─────────────────────────────────────────────

fn uniform_point_in(indices: &[usize], width: usize, rng: &mut ChaCha8Rng) -> PromptPoint {
    let idx = indices[rng.gen_range(0..indices.len())];
    PromptPoint {
        x: (idx % width) as f32 + 0.5,
        y: (idx / width) as f32 + 0.5,
        label: PointLabel::Positive,
    }
}

/// Iterative prompt mining against a precomputed image embedding: start with
/// a uniform point inside the ground-truth mask, then repeatedly predict and
/// sample the next point from the region the prediction misses. If the
/// prediction covers the whole mask, fall back to uniform resampling.
pub fn hard_prompt_sample_with_emb(
    model: &SegModel,
    embedding: &Tensor,
    gt_mask: &Mask,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PromptSet> {
    if gt_mask.is_empty() {
        return Err(Error::InvalidArgument("gt mask is empty".into()));
    }
    let gt_indices = gt_mask.set_indices();
    let mut prompts = PromptSet::default();
    prompts.points.push(uniform_point_in(&gt_indices, gt_mask.width, rng));
    for _ in 0..round {
        let pred = no_grad(|| -> Result<Mask> {
            let out = model.decode_mask(embedding, &prompts)?;
            Ok(best_mask_binary(&out))
        })?;
        let diff: Vec<usize> = gt_indices
            .iter()
            .copied()
            .filter(|&i| !pred.pixels[i])
            .collect();
        let pool = if diff.is_empty() { &gt_indices } else { &diff };
        prompts.points.push(uniform_point_in(pool, gt_mask.width, rng));
    }
    Ok(prompts)
}

/// As [`hard_prompt_sample_with_emb`], encoding the image first.
pub fn hard_prompt_sample(
    model: &SegModel,
    image: &crate::model::Image,
    gt_mask: &Mask,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PromptSet> {
    let emb = no_grad(|| model.encode_image(image))?;
    hard_prompt_sample_with_emb(model, &emb, gt_mask, round, rng)
}

// ── Teacher embedding cache ──────────────────────────────────────────

/// Precompute teacher embeddings for every sample (dataset-index keyed).
pub fn precompute_teacher_embeddings(
    teacher: &SegModel,
    samples: &[TrainSample],
) -> Result<Vec<Tensor>> {
    no_grad(|| samples.iter().map(|s| teacher.encode_image(&s.image)).collect())
}

pub fn save_embedding_cache(path: impl AsRef<Path>, embs: &[Tensor]) -> Result<()> {
    let mut c = Container::new(format!("kind=embedding_cache\ncount={}\n", embs.len()));
    for (i, e) in embs.iter().enumerate() {
        c.push(format!("emb_{i:05}"), e.shape(), e.data().to_vec());
    }
    c.write_to(path)
}

pub fn load_embedding_cache(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let c = Container::read_from(path)?;
    if c.config_value("kind") != Some("embedding_cache") {
        return Err(Error::Format("container is not an embedding cache".into()));
    }
    let count: usize = c
        .config_value("count")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("embedding cache missing count".into()))?;
    (0..count)
        .map(|i| {
            let rec = c.require(&format!("emb_{i:05}"))?;
            Ok(Tensor::new(&rec.dims, rec.data.clone()))
        })
        .collect()
}

// ── Training loop ────────────────────────────────────────────────────

/// One optimizer step's loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub total: f32,
    pub embedding: f32,
    pub token: f32,
    pub output: f32,
    pub gt: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
}

impl TrainLog {
    /// Moving-window mean of the total loss.
    pub fn smoothed(&self, window: usize) -> Vec<f32> {
        let w = window.max(1);
        self.records
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let lo = i.saturating_sub(w - 1);
                let slice = &self.records[lo..=i];
                slice.iter().map(|r| r.total as f64).sum::<f64>() as f32 / slice.len() as f32
            })
            .collect()
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "iter={} total={:.6} embedding={:.6} token={:.6} output={:.6} gt={:.6}",
                r.iter, r.total, r.embedding, r.token, r.output, r.gt
            );
        }
        s
    }
}

fn check_finite(term: &'static str, value: f32) -> Result<f32> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { term, value });
    }
    Ok(value)
}

/// Distill `student` against a frozen `teacher` with cached embeddings.
/// The teacher is never mutated; identical configs and seeds produce
/// identical loss histories.
pub fn train_student_cached(
    teacher: &SegModel,
    student: &mut SegModel,
    samples: &[TrainSample],
    teacher_embs: &[Tensor],
    cfg: &DistillConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if teacher_embs.len() != samples.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cached embeddings for {} samples",
            teacher_embs.len(),
            samples.len()
        )));
    }
    if teacher.param_count() <= student.param_count() {
        return Err(Error::InvalidArgument(format!(
            "teacher capacity ({}) must exceed student capacity ({})",
            teacher.param_count(),
            student.param_count()
        )));
    }
    run_training(Some((teacher, teacher_embs)), student, samples, cfg)
}

/// Distill with teacher embeddings computed on the fly.
pub fn train_student(
    teacher: &SegModel,
    student: &mut SegModel,
    samples: &[TrainSample],
    cfg: &DistillConfig,
) -> Result<TrainLog> {
    let embs = precompute_teacher_embeddings(teacher, samples)?;
    train_student_cached(teacher, student, samples, &embs, cfg)
}

/// Ground-truth-only training (used for the teacher itself).
pub fn train_gt(model: &mut SegModel, samples: &[TrainSample], cfg: &DistillConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    run_training(None, model, samples, cfg)
}

fn run_training(
    teacher: Option<(&SegModel, &[Tensor])>,
    student: &mut SegModel,
    samples: &[TrainSample],
    cfg: &DistillConfig,
) -> Result<TrainLog> {
    let mut rng = sub_rng(cfg.seed, 0x7241);
    let mut opt = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let distill_on =
        teacher.is_some() && (cfg.alpha != 0.0 || cfg.beta != 0.0 || cfg.gamma != 0.0);
    let mut iter = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for &idx in &order {
            let sample = &samples[idx];
            if sample.gt_masks.is_empty() {
                continue;
            }
            // Per-prompt tasks: (target mask, resampling depth).
            let tasks: Vec<(usize, usize)> = (0..cfg.prompts_per_iter)
                .map(|_| {
                    (
                        rng.gen_range(0..sample.gt_masks.len()),
                        rng.gen_range(0..=cfg.max_sampling_round),
                    )
                })
                .collect();

            let tape = Tape::new();
            let record = tape.record(|| -> Result<IterRecord> {
                let s_emb = student.encode_image(&sample.image)?;

                let (l_emb, t_emb) = match &teacher {
                    Some((_, embs)) => {
                        let t_emb = &embs[idx];
                        (embedding_loss(t_emb, &s_emb)?, Some(t_emb.clone()))
                    }
                    None => (Tensor::scalar(0.0), None),
                };

                let mut token_losses: Vec<(Tensor, f32)> = Vec::new();
                let mut output_losses: Vec<Tensor> = Vec::new();
                let mut hardness: Vec<f32> = Vec::new();
                let mut gt_losses: Vec<(Tensor, f32)> = Vec::new();

                for &(mask_idx, round) in &tasks {
                    let gt = &sample.gt_masks[mask_idx];
                    let prompts =
                        hard_prompt_sample_with_emb(student, &s_emb, gt, round, &mut rng)?;
                    let s_out = student.decode_mask(&s_emb, &prompts)?;

                    if distill_on {
                        let (t_model, _) = teacher.as_ref().unwrap();
                        let t_out = no_grad(|| {
                            t_model.decode_mask(t_emb.as_ref().unwrap(), &prompts)
                        })?;
                        token_losses.push((token_loss(&t_out, &s_out)?, 1.0));
                        output_losses.push(output_loss(&t_out, &s_out)?);
                        let h = if cfg.hardness_enabled {
                            mask_hardness(
                                &best_mask_binary(&t_out),
                                &best_mask_binary(&s_out),
                                gt,
                                cfg.epsilon,
                            )?
                        } else {
                            1.0
                        };
                        hardness.push(h);
                    }
                    gt_losses.push((gt_loss(&s_out, gt, cfg)?, 1.0));
                }

                let n_prompts = tasks.len() as f32;
                let l_gt_mean = {
                    let scaled: Vec<(Tensor, f32)> =
                        gt_losses.into_iter().map(|(t, _)| (t, 1.0 / n_prompts)).collect();
                    weighted_sum(&scaled)
                };

                let (l_token_mean, l_output_val, l_distill) = if distill_on {
                    let tok: Vec<(Tensor, f32)> = token_losses
                        .into_iter()
                        .map(|(t, _)| (t, 1.0 / n_prompts))
                        .collect();
                    let l_tok = weighted_sum(&tok);
                    let out_val: f32 =
                        output_losses.iter().map(|t| t.item()).sum::<f32>() / n_prompts;
                    let l_d = distill_loss(&l_emb, &l_tok, &output_losses, &hardness, cfg)?;
                    (l_tok, out_val, l_d)
                } else {
                    (Tensor::scalar(0.0), 0.0, Tensor::scalar(0.0))
                };

                let total = if distill_on {
                    weighted_sum(&[(l_distill, 1.0), (l_gt_mean.clone(), 1.0)])
                } else {
                    l_gt_mean.clone()
                };

                let rec = IterRecord {
                    iter,
                    embedding: check_finite("embedding", l_emb.item())?,
                    token: check_finite("token", l_token_mean.item())?,
                    output: check_finite("output", l_output_val)?,
                    gt: check_finite("gt", l_gt_mean.item())?,
                    total: check_finite("total", total.item())?,
                };
                tape.backward(&total)?;
                Ok(rec)
            })?;

            let mut params = student.params_mut();
            opt.step(&mut params);
            log.records.push(record);
            iter += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests;

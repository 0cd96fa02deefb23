//! Segmentation metrics and prompt-based evaluation protocols.
//!
//! The point protocol mirrors interactive evaluation: each new prompt is
//! placed at the maximum of the exact Euclidean distance transform of the
//! current false-negative / false-positive regions.

use crate::data::{Mask, TrainSample};
use crate::error::{Error, Result};
use crate::model::{
    DecoderOutput, MatHook, PointLabel, PromptPoint, PromptSet, SegModel,
};
use crate::tensor::no_grad;
use std::fmt::Write as _;
use std::time::Instant;

/// Intersection over union of two binary masks. Both empty counts as 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f32> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch {
            op: "iou",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f32 / union as f32)
}

/// Binarized best-channel mask of a decoder output (logit threshold 0).
pub fn best_mask_binary(out: &DecoderOutput) -> Mask {
    let (k, _) = crate::model::select_best_mask(out);
    let shape = out.masks.shape();
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    Mask::from_logits(&out.masks.data()[k * hw..(k + 1) * hw], w, h, 0.0)
}

// ── Exact Euclidean distance transform ───────────────────────────────

const INF: f64 = 1e18;

/// 1-D squared distance transform by the lower-envelope-of-parabolas method.
fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64;
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = ((q as f64) - (p as f64)).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance from each set pixel of `region` to the
/// nearest unset pixel; the outside of the image counts as unset.
pub fn distance_transform_sq(region: &Mask) -> Vec<f64> {
    let (w, h) = (region.width, region.height);
    // Pad with one ring of background so image borders act as boundary.
    let (pw, ph) = (w + 2, h + 2);
    let mut f = vec![0.0f64; pw * ph];
    for y in 0..h {
        for x in 0..w {
            f[(y + 1) * pw + (x + 1)] = if region.get(x, y) { INF } else { 0.0 };
        }
    }
    // Columns, then rows.
    let mut col_in = vec![0.0f64; ph];
    let mut col_out = vec![0.0f64; ph];
    for x in 0..pw {
        for y in 0..ph {
            col_in[y] = f[y * pw + x];
        }
        dt_1d(&col_in, &mut col_out);
        for y in 0..ph {
            f[y * pw + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0f64; pw];
    for y in 0..ph {
        let row: Vec<f64> = f[y * pw..(y + 1) * pw].to_vec();
        dt_1d(&row, &mut row_out);
        f[y * pw..(y + 1) * pw].copy_from_slice(&row_out);
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = f[(y + 1) * pw + (x + 1)];
        }
    }
    out
}

/// Next corrective prompt: the point of maximal distance-transform value in
/// the false-negative region (positive label) or false-positive region
/// (negative label). FN wins ties, then row-major order. `None` when the
/// prediction already matches the ground truth.
pub fn next_eval_point(gt: &Mask, pred: &Mask) -> Result<Option<PromptPoint>> {
    if gt.width != pred.width || gt.height != pred.height {
        return Err(Error::ShapeMismatch {
            op: "next_eval_point",
            lhs: vec![gt.height, gt.width],
            rhs: vec![pred.height, pred.width],
        });
    }
    let (w, h) = (gt.width, gt.height);
    let mut fn_region = Mask::empty(w, h);
    let mut fp_region = Mask::empty(w, h);
    let mut any = false;
    for i in 0..w * h {
        let f_n = gt.pixels[i] && !pred.pixels[i];
        let f_p = pred.pixels[i] && !gt.pixels[i];
        fn_region.pixels[i] = f_n;
        fp_region.pixels[i] = f_p;
        any |= f_n || f_p;
    }
    if !any {
        return Ok(None);
    }
    let mut best_d = 0.0f64;
    let mut best: Option<(usize, PointLabel)> = None;
    if !fn_region.is_empty() {
        let dt = distance_transform_sq(&fn_region);
        for (i, &d) in dt.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = Some((i, PointLabel::Positive));
            }
        }
    }
    if !fp_region.is_empty() {
        let dt = distance_transform_sq(&fp_region);
        for (i, &d) in dt.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = Some((i, PointLabel::Negative));
            }
        }
    }
    let (idx, label) = best.expect("nonempty error region must yield a point");
    Ok(Some(PromptPoint {
        x: (idx % w) as f32 + 0.5,
        y: (idx / w) as f32 + 0.5,
        label,
    }))
}

// ── Reports ──────────────────────────────────────────────────────────

/// Aggregated evaluation result.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub protocol: String,
    /// Final IoU per evaluated mask, dataset order.
    pub per_mask_ious: Vec<f32>,
    /// Arithmetic mean of `per_mask_ious`.
    pub miou: f32,
    /// Points protocol: mean IoU after 1..=max_points prompts.
    pub curve: Vec<f32>,
    pub decoder_calls: usize,
    /// Measured, not serialized (kept out of deterministic outputs).
    pub wall_time_secs: f64,
}

impl EvalReport {
    fn from_parts(protocol: &str, per_mask: Vec<f32>, curve: Vec<f32>, calls: usize, secs: f64) -> EvalReport {
        let miou = if per_mask.is_empty() {
            0.0
        } else {
            (per_mask.iter().map(|&v| v as f64).sum::<f64>() / per_mask.len() as f64) as f32
        };
        EvalReport {
            protocol: protocol.to_string(),
            per_mask_ious: per_mask,
            miou,
            curve,
            decoder_calls: calls,
            wall_time_secs: secs,
        }
    }

    /// Deterministic line-delimited serialization (no timing fields).
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol={}", self.protocol);
        let _ = writeln!(s, "masks={}", self.per_mask_ious.len());
        let _ = writeln!(s, "miou={:.6}", self.miou);
        let _ = writeln!(s, "decoder_calls={}", self.decoder_calls);
        for (i, v) in self.curve.iter().enumerate() {
            let _ = writeln!(s, "curve {} {:.6}", i + 1, v);
        }
        for (i, v) in self.per_mask_ious.iter().enumerate() {
            let _ = writeln!(s, "mask {i} {v:.6}");
        }
        s
    }
}

/// Interactive point-prompt protocol: iteratively add corrective points and
/// record the IoU after each count.
pub fn eval_points_curve(
    model: &SegModel,
    samples: &[&TrainSample],
    max_points: usize,
    hook: Option<&dyn MatHook>,
) -> Result<EvalReport> {
    if max_points == 0 {
        return Err(Error::InvalidArgument("max_points must be >= 1".into()));
    }
    let start = Instant::now();
    let mut calls = 0usize;
    let mut final_ious = Vec::new();
    let mut curve_sum = vec![0.0f64; max_points];
    let mut mask_count = 0usize;
    no_grad(|| -> Result<()> {
        for sample in samples {
            let emb = model.encode_image_hooked(&sample.image, hook)?;
            for gt in &sample.gt_masks {
                let mut prompts = PromptSet::default();
                let mut pred = Mask::empty(gt.width, gt.height);
                let mut current = 0.0f32;
                for k in 0..max_points {
                    if let Some(p) = next_eval_point(gt, &pred)? {
                        prompts.points.push(p);
                        let out = model.decode_mask_hooked(&emb, &prompts, hook)?;
                        calls += 1;
                        pred = best_mask_binary(&out);
                        current = iou(&pred, gt)?;
                    }
                    curve_sum[k] += current as f64;
                }
                final_ious.push(current);
                mask_count += 1;
            }
        }
        Ok(())
    })?;
    let curve: Vec<f32> =
        curve_sum.iter().map(|&v| (v / mask_count.max(1) as f64) as f32).collect();
    Ok(EvalReport::from_parts(
        "points",
        final_ious,
        curve,
        calls,
        start.elapsed().as_secs_f64(),
    ))
}

/// Box-prompt protocol: prompt each object's tight bounding box.
pub fn eval_boxes(
    model: &SegModel,
    samples: &[&TrainSample],
    hook: Option<&dyn MatHook>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut calls = 0usize;
    let mut ious = Vec::new();
    no_grad(|| -> Result<()> {
        for sample in samples {
            let emb = model.encode_image_hooked(&sample.image, hook)?;
            for gt in &sample.gt_masks {
                let Some((x0, y0, x1, y1)) = gt.bbox() else { continue };
                let prompts =
                    PromptSet::single_box(x0 as f32, y0 as f32, x1 as f32, y1 as f32);
                let out = model.decode_mask_hooked(&emb, &prompts, hook)?;
                calls += 1;
                let pred = best_mask_binary(&out);
                ious.push(iou(&pred, gt)?);
            }
        }
        Ok(())
    })?;
    Ok(EvalReport::from_parts(
        "boxes",
        ious,
        Vec::new(),
        calls,
        start.elapsed().as_secs_f64(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::sub_rng;
    use rand::Rng;

    fn random_mask(seed: u64, w: usize, h: usize, fill: f64) -> Mask {
        let mut rng = sub_rng(seed, 0xE7);
        let mut m = Mask::empty(w, h);
        for p in &mut m.pixels {
            *p = rng.gen_bool(fill);
        }
        m
    }

    #[test]
    fn iou_basics() {
        let mut a = Mask::empty(2, 2);
        a.pixels = vec![true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);

        let mut b = Mask::empty(2, 2);
        b.pixels = vec![false, false, true, true];
        assert_eq!(iou(&a, &b).unwrap(), 0.0);

        // Overlap 1 pixel, union 3 pixels.
        let mut c = Mask::empty(2, 2);
        c.pixels = vec![false, true, true, false];
        assert!((iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-7);

        let e = Mask::empty(2, 2);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);

        let wrong = Mask::empty(3, 2);
        assert!(iou(&a, &wrong).is_err());
    }

    #[test]
    fn iou_is_symmetric() {
        for seed in 0..8u64 {
            let a = random_mask(seed, 9, 7, 0.4);
            let b = random_mask(seed + 100, 9, 7, 0.6);
            assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn distance_transform_matches_bruteforce() {
        for seed in 0..12u64 {
            let m = random_mask(seed, 13, 9, 0.55);
            let fast = distance_transform_sq(&m);
            let slow = reference::distance_sq_bruteforce(&m.pixels, 9, 13);
            for (i, (&f, &s)) in fast.iter().zip(&slow).enumerate() {
                assert!((f - s).abs() < 1e-9, "seed {seed} pixel {i}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn next_point_converged_on_equal_masks() {
        let m = random_mask(3, 8, 8, 0.5);
        assert!(next_eval_point(&m, &m).unwrap().is_none());
    }

    #[test]
    fn next_point_on_empty_pred_is_disk_center() {
        let mut gt = Mask::empty(21, 21);
        for y in 0..21 {
            for x in 0..21 {
                let (dx, dy) = (x as f32 - 10.0, y as f32 - 10.0);
                if dx * dx + dy * dy <= 49.0 {
                    gt.pixels[y * 21 + x] = true;
                }
            }
        }
        let p = next_eval_point(&gt, &Mask::empty(21, 21)).unwrap().unwrap();
        assert_eq!(p.label, PointLabel::Positive);
        assert_eq!((p.x, p.y), (10.5, 10.5));
    }

    #[test]
    fn next_point_lies_inside_its_source_region() {
        for seed in 0..10u64 {
            let gt = random_mask(seed, 12, 12, 0.4);
            let pred = random_mask(seed + 50, 12, 12, 0.4);
            if let Some(p) = next_eval_point(&gt, &pred).unwrap() {
                let (x, y) = (p.x as usize, p.y as usize);
                match p.label {
                    PointLabel::Positive => {
                        assert!(gt.get(x, y) && !pred.get(x, y));
                    }
                    PointLabel::Negative => {
                        assert!(pred.get(x, y) && !gt.get(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn next_point_matches_bruteforce_argmax() {
        for seed in 0..8u64 {
            let gt = random_mask(seed, 10, 8, 0.45);
            let pred = random_mask(seed + 31, 10, 8, 0.45);
            let got = next_eval_point(&gt, &pred).unwrap();

            // Oracle: brute-force distance maps, FN first, row-major ties.
            let (w, h) = (10usize, 8usize);
            let mut fn_r = vec![false; w * h];
            let mut fp_r = vec![false; w * h];
            for i in 0..w * h {
                fn_r[i] = gt.pixels[i] && !pred.pixels[i];
                fp_r[i] = pred.pixels[i] && !gt.pixels[i];
            }
            let dt_fn = reference::distance_sq_bruteforce(&fn_r, h, w);
            let dt_fp = reference::distance_sq_bruteforce(&fp_r, h, w);
            let mut best_d = 0.0;
            let mut best = None;
            for (i, &d) in dt_fn.iter().enumerate() {
                if d > best_d {
                    best_d = d;
                    best = Some((i, PointLabel::Positive));
                }
            }
            for (i, &d) in dt_fp.iter().enumerate() {
                if d > best_d {
                    best_d = d;
                    best = Some((i, PointLabel::Negative));
                }
            }
            match (got, best) {
                (None, None) => {}
                (Some(p), Some((idx, label))) => {
                    assert_eq!(p.label, label, "seed {seed}");
                    assert_eq!(
                        ((p.x - 0.5) as usize, (p.y - 0.5) as usize),
                        (idx % w, idx / w),
                        "seed {seed}"
                    );
                }
                other => panic!("seed {seed}: mismatch {other:?}"),
            }
        }
    }
}

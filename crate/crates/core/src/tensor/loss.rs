//! Differentiable loss functions. Targets are constants (no gradient flows
//! into them).

use super::nn::sigmoid_scalar;
use super::tape::{is_recording, record_entry};
use super::{accumulate_grad, out_grad, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

/// Mean absolute difference.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b, "l1_loss")?;
    let n = a.numel().max(1);
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() as f64)
        .sum();
    let rg = is_recording() && (a.requires_grad() || b.requires_grad());
    let out = Tensor::result(vec![1], vec![(total / n as f64) as f32], rg);
    if rg {
        let (ai, bi, oi) = (Rc::clone(&a.inner), Rc::clone(&b.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let scale = d[0] / n as f32;
                let signs: Vec<f32> = ai
                    .data
                    .iter()
                    .zip(&bi.data)
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if ai.requires_grad {
                    accumulate_grad(&ai, &signs);
                }
                if bi.requires_grad {
                    let neg: Vec<f32> = signs.iter().map(|&s| -s).collect();
                    accumulate_grad(&bi, &neg);
                }
            }
        });
    }
    Ok(out)
}

fn check_target(logits: &Tensor, target: &[f32], op: &'static str) -> Result<()> {
    if logits.numel() != target.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: logits.shape().to_vec(),
            rhs: vec![target.len()],
        });
    }
    Ok(())
}

/// Mean binary cross-entropy from logits against a constant 0/1 target.
/// Computed as `softplus(z) - z*y` for stability.
pub fn bce_with_logits(logits: &Tensor, target: &[f32]) -> Result<Tensor> {
    check_target(logits, target, "bce_with_logits")?;
    let n = logits.numel().max(1);
    let total: f64 = logits
        .data()
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let sp = if z > 0.0 {
                z as f64 + (1.0 + (-z as f64).exp()).ln()
            } else {
                (1.0 + (z as f64).exp()).ln()
            };
            sp - z as f64 * y as f64
        })
        .sum();
    let rg = is_recording() && logits.requires_grad();
    let out = Tensor::result(vec![1], vec![(total / n as f64) as f32], rg);
    if rg {
        let (li, oi) = (Rc::clone(&logits.inner), Rc::clone(&out.inner));
        let target = target.to_vec();
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let scale = d[0] / n as f32;
                let g: Vec<f32> = li
                    .data
                    .iter()
                    .zip(&target)
                    .map(|(&z, &y)| scale * (sigmoid_scalar(z) - y))
                    .collect();
                accumulate_grad(&li, &g);
            }
        });
    }
    Ok(out)
}

/// Mean sigmoid focal loss from logits against a constant 0/1 target.
pub fn focal_loss(logits: &Tensor, target: &[f32], alpha: f32, gamma: f32) -> Result<Tensor> {
    check_target(logits, target, "focal_loss")?;
    let n = logits.numel().max(1);
    let total: f64 = logits
        .data()
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let p = sigmoid_scalar(z) as f64;
            let (pt, at) = if y > 0.5 {
                (p, alpha as f64)
            } else {
                (1.0 - p, 1.0 - alpha as f64)
            };
            -at * (1.0 - pt).powf(gamma as f64) * pt.ln()
        })
        .sum();
    let rg = is_recording() && logits.requires_grad();
    let out = Tensor::result(vec![1], vec![(total / n as f64) as f32], rg);
    if rg {
        let (li, oi) = (Rc::clone(&logits.inner), Rc::clone(&out.inner));
        let target = target.to_vec();
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let scale = d[0] / n as f32;
                let g: Vec<f32> = li
                    .data
                    .iter()
                    .zip(&target)
                    .map(|(&z, &y)| {
                        let p = sigmoid_scalar(z) as f64;
                        let (pt, at, sign) = if y > 0.5 {
                            (p, alpha as f64, 1.0)
                        } else {
                            (1.0 - p, 1.0 - alpha as f64, -1.0)
                        };
                        // d/dz folded to avoid 1/pt: at*sign*(gamma*pt*(1-pt)^g*ln(pt) - (1-pt)^(g+1))
                        let one_m = 1.0 - pt;
                        let gterm = at
                            * sign
                            * (gamma as f64 * pt * one_m.powf(gamma as f64) * pt.ln()
                                - one_m.powf(gamma as f64 + 1.0));
                        scale * gterm as f32
                    })
                    .collect();
                accumulate_grad(&li, &g);
            }
        });
    }
    Ok(out)
}

/// Soft dice loss from logits: `1 - 2*sum(p*y) / (sum(p) + sum(y))`.
pub fn soft_dice_loss(logits: &Tensor, target: &[f32]) -> Result<Tensor> {
    check_target(logits, target, "soft_dice_loss")?;
    let probs: Vec<f32> = logits.data().iter().map(|&z| sigmoid_scalar(z)).collect();
    let num: f64 = probs.iter().zip(target).map(|(&p, &y)| (p * y) as f64).sum::<f64>() * 2.0;
    let den: f64 = probs.iter().map(|&p| p as f64).sum::<f64>()
        + target.iter().map(|&y| y as f64).sum::<f64>();
    let value = if den > 0.0 { 1.0 - num / den } else { 0.0 };
    let rg = is_recording() && logits.requires_grad();
    let out = Tensor::result(vec![1], vec![value as f32], rg);
    if rg && den > 0.0 {
        let (li, oi) = (Rc::clone(&logits.inner), Rc::clone(&out.inner));
        let target = target.to_vec();
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let g: Vec<f32> = li
                    .data
                    .iter()
                    .zip(probs.iter().zip(&target))
                    .map(|(&_z, (&p, &y))| {
                        // d(1 - num/den)/dp = -(2y*den - num)/den^2, times sigmoid'
                        let dp = -((2.0 * y as f64 * den - num) / (den * den));
                        d[0] * (dp * (p as f64) * (1.0 - p as f64)) as f32
                    })
                    .collect();
                accumulate_grad(&li, &g);
            }
        });
    }
    Ok(out)
}

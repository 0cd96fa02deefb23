//! Neural-network primitives: convolution, normalization, activations.

use super::tape::{is_recording, record_entry};
use super::{accumulate_grad, out_grad, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

/// Error function, evaluated in f64 (Abramowitz & Stegun 7.1.26, |err| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn gelu_scalar(x: f32) -> f32 {
    let xf = x as f64;
    (0.5 * xf * (1.0 + erf(xf / std::f64::consts::SQRT_2))) as f32
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let xf = x as f64;
    let cdf = 0.5 * (1.0 + erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf + xf * pdf) as f32
}

/// Exact-erf GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(x.shape().to_vec(), data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let g: Vec<f32> = d
                    .iter()
                    .zip(&xi.data)
                    .map(|(&dv, &xv)| dv * gelu_grad_scalar(xv))
                    .collect();
                accumulate_grad(&xi, &g);
            }
        });
    }
    out
}

// Largest f32 below 1; keeps sigmoid outputs strictly inside (0, 1).
const ONE_MINUS_ULP: f32 = 0.999_999_94;

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// Logistic sigmoid, elementwise, output strictly in (0, 1).
pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(x.shape().to_vec(), data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let g: Vec<f32> = d
                    .iter()
                    .zip(&oi.data)
                    .map(|(&dv, &ov)| dv * ov * (1.0 - ov))
                    .collect();
                accumulate_grad(&xi, &g);
            }
        });
    }
    out
}

/// Max-subtracted softmax over the last axis of a rank-1 or rank-2 tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match x.shape() {
        [c] => (1usize, *c),
        [r, c] => (*r, *c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            })
        }
    };
    if cols == 0 {
        return Err(Error::InvalidArgument("softmax over empty axis".into()));
    }
    let src = x.data();
    let mut data = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *o = e as f32;
            denom += e;
        }
        for o in &mut data[r * cols..(r + 1) * cols] {
            *o = (*o as f64 / denom) as f32;
        }
    }
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(x.shape().to_vec(), data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let p = &oi.data;
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0f64;
                    for j in 0..cols {
                        dot += (d[base + j] * p[base + j]) as f64;
                    }
                    for j in 0..cols {
                        dx[base + j] = p[base + j] * (d[base + j] - dot as f32);
                    }
                }
                accumulate_grad(&xi, &dx);
            }
        });
    }
    Ok(out)
}

/// Layer normalization over the last axis of `[r, c]`, with affine scale/shift.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (rows, cols) = match x.shape() {
        [r, c] => (*r, *c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            })
        }
    };
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let src = x.data();
    let g = gamma.data();
    let b = beta.data();
    let mut normed = vec![0.0f32; rows * cols]; // (x - mean) / std, pre-affine
    let mut inv_std = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[r] = istd as f32;
        for j in 0..cols {
            normed[r * cols + j] = ((row[j] as f64 - mean) * istd) as f32;
        }
    }
    let mut data = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for j in 0..cols {
            data[r * cols + j] = normed[r * cols + j] * g[j] + b[j];
        }
    }
    let rg = is_recording()
        && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    let out = Tensor::result(vec![rows, cols], data, rg);
    if rg {
        let (xi, gi, bi, oi) = (
            Rc::clone(&x.inner),
            Rc::clone(&gamma.inner),
            Rc::clone(&beta.inner),
            Rc::clone(&out.inner),
        );
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let g = &gi.data;
                if gi.requires_grad {
                    let mut dg = vec![0.0f32; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += d[r * cols + j] * normed[r * cols + j];
                        }
                    }
                    accumulate_grad(&gi, &dg);
                }
                if bi.requires_grad {
                    let mut db = vec![0.0f32; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += d[r * cols + j];
                        }
                    }
                    accumulate_grad(&bi, &db);
                }
                if xi.requires_grad {
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        // dnorm = d * gamma; dx = istd * (dnorm - mean(dnorm) - normed * mean(dnorm*normed))
                        let mut mean_dn = 0.0f64;
                        let mut mean_dn_n = 0.0f64;
                        for j in 0..cols {
                            let dn = (d[base + j] * g[j]) as f64;
                            mean_dn += dn;
                            mean_dn_n += dn * normed[base + j] as f64;
                        }
                        mean_dn /= cols as f64;
                        mean_dn_n /= cols as f64;
                        for j in 0..cols {
                            let dn = (d[base + j] * g[j]) as f64;
                            dx[base + j] = (inv_std[r] as f64
                                * (dn - mean_dn - normed[base + j] as f64 * mean_dn_n))
                                as f32;
                        }
                    }
                    accumulate_grad(&xi, &dx);
                }
            }
        });
    }
    Ok(out)
}

/// 2-D convolution: input `[Cin, H, W]`, weight `[Cout, Cin, kh, kw]`,
/// zero padding, square stride.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin, h, width) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            })
        }
    };
    let (cout, wcin, kh, kw) = match w.shape() {
        [co, ci, kh, kw] => (*co, *ci, *kh, *kw),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            })
        }
    };
    if cin != wcin || stride == 0 || h + 2 * pad < kh || width + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (width + 2 * pad - kw) / stride + 1;
    let data = conv2d_raw(x.data(), w.data(), cin, h, width, cout, kh, kw, stride, pad, ho, wo);
    let rg = is_recording() && (x.requires_grad() || w.requires_grad());
    let out = Tensor::result(vec![cout, ho, wo], data, rg);
    if rg {
        let (xi, wi, oi) = (Rc::clone(&x.inner), Rc::clone(&w.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                if wi.requires_grad {
                    let mut dw = vec![0.0f32; cout * cin * kh * kw];
                    for co in 0..cout {
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let mut acc = 0.0f32;
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ki) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kj) as isize - pad as isize;
                                            if ix < 0 || ix >= width as isize {
                                                continue;
                                            }
                                            acc += d[(co * ho + oy) * wo + ox]
                                                * xi.data[(ci * h + iy as usize) * width
                                                    + ix as usize];
                                        }
                                    }
                                    dw[((co * cin + ci) * kh + ki) * kw + kj] = acc;
                                }
                            }
                        }
                    }
                    accumulate_grad(&wi, &dw);
                }
                if xi.requires_grad {
                    let mut dx = vec![0.0f32; cin * h * width];
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let dv = d[(co * ho + oy) * wo + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ki in 0..kh {
                                        let iy = (oy * stride + ki) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..kw {
                                            let ix =
                                                (ox * stride + kj) as isize - pad as isize;
                                            if ix < 0 || ix >= width as isize {
                                                continue;
                                            }
                                            dx[(ci * h + iy as usize) * width + ix as usize] +=
                                                dv * wi.data
                                                    [((co * cin + ci) * kh + ki) * kw + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate_grad(&xi, &dx);
                }
            }
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f32],
    w: &[f32],
    cin: usize,
    h: usize,
    width: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; cout * ho * wo];
    for co in 0..cout {
        for ci in 0..cin {
            let w_base = (co * cin + ci) * kh * kw;
            for oy in 0..ho {
                let out_row = co * ho * wo + oy * wo;
                for ki in 0..kh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = (ci * h + iy as usize) * width;
                    for kj in 0..kw {
                        let wv = w[w_base + ki * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = kj as isize - pad as isize;
                        for ox in 0..wo {
                            let ix = ox as isize * stride as isize + off;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            out[out_row + ox] += wv * x[x_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear 2x upsampling of `[C, H, W]` (half-pixel centers).
pub fn upsample2x_bilinear(x: &Tensor) -> Result<Tensor> {
    let (ch, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "upsample2x_bilinear",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            })
        }
    };
    let (ho, wo) = (h * 2, w * 2);
    // Each output index maps to source position (i + 0.5) / 2 - 0.5.
    let axis_taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let pos = (i as f32 + 0.5) / 2.0 - 0.5;
                let lo = pos.floor();
                let t = pos - lo;
                let i0 = (lo.max(0.0) as usize).min(n_in - 1);
                let i1 = ((lo + 1.0).max(0.0) as usize).min(n_in - 1);
                (i0, i1, t)
            })
            .collect()
    };
    let ytaps = axis_taps(ho, h);
    let xtaps = axis_taps(wo, w);
    let src = x.data();
    let mut data = vec![0.0f32; ch * ho * wo];
    for c in 0..ch {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                data[(c * ho + oy) * wo + ox] = top + (bot - top) * ty;
            }
        }
    }
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(vec![ch, ho, wo], data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let mut dx = vec![0.0f32; ch * h * w];
                for c in 0..ch {
                    for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                        for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                            let dv = d[(c * ho + oy) * wo + ox];
                            let base = c * h * w;
                            dx[base + y0 * w + x0] += dv * (1.0 - tx) * (1.0 - ty);
                            dx[base + y0 * w + x1] += dv * tx * (1.0 - ty);
                            dx[base + y1 * w + x0] += dv * (1.0 - tx) * ty;
                            dx[base + y1 * w + x1] += dv * tx * ty;
                        }
                    }
                }
                accumulate_grad(&xi, &dx);
            }
        });
    }
    Ok(out)
}

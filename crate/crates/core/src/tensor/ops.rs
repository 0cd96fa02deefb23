//! Shape ops, elementwise arithmetic and matrix products.

use super::tape::{is_recording, record_entry};
use super::{accumulate_grad, out_grad, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Row-major matrix product, `[m,k] x [k,n] -> [m,n]`.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A^T x B` with A `[m,k]`, B `[m,n]` -> `[k,n]`.
fn matmul_at_b(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A x B^T` with A `[m,k]`, B `[n,k]` -> `[m,n]`.
fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rank2(a, "matmul")?;
    let (k2, n) = rank2(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = matmul_raw(a.data(), b.data(), m, k, n);
    let rg = is_recording() && (a.requires_grad() || b.requires_grad());
    let out = Tensor::result(vec![m, n], data, rg);
    if rg {
        let (ai, bi, oi) = (Rc::clone(&a.inner), Rc::clone(&b.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                if ai.requires_grad {
                    accumulate_grad(&ai, &matmul_a_bt(&d, &bi.data, m, n, k));
                }
                if bi.requires_grad {
                    accumulate_grad(&bi, &matmul_at_b(&ai.data, &d, m, k, n));
                }
            }
        });
    }
    Ok(out)
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    let (r, c) = rank2(x, "transpose2d")?;
    let src = x.data();
    let mut data = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(vec![c, r], data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let mut dx = vec![0.0f32; r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = d[j * r + i];
                    }
                }
                accumulate_grad(&xi, &dx);
            }
        });
    }
    Ok(out)
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(shape.to_vec(), x.data().to_vec(), rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                accumulate_grad(&xi, &d);
            }
        });
    }
    Ok(out)
}

macro_rules! binary_elementwise {
    ($name:ident, $fwd:expr, $da:expr, $db:expr) => {
        pub fn $name(a: &Tensor, b: &Tensor) -> Result<Tensor> {
            a.check_same_shape(b, stringify!($name))?;
            let fwd: fn(f32, f32) -> f32 = $fwd;
            let data: Vec<f32> =
                a.data().iter().zip(b.data()).map(|(&x, &y)| fwd(x, y)).collect();
            let rg = is_recording() && (a.requires_grad() || b.requires_grad());
            let out = Tensor::result(a.shape().to_vec(), data, rg);
            if rg {
                let (ai, bi, oi) =
                    (Rc::clone(&a.inner), Rc::clone(&b.inner), Rc::clone(&out.inner));
                record_entry(&out, move || {
                    if let Some(d) = out_grad(&oi) {
                        let da: fn(f32, f32, f32) -> f32 = $da;
                        let db: fn(f32, f32, f32) -> f32 = $db;
                        if ai.requires_grad {
                            let g: Vec<f32> = d
                                .iter()
                                .zip(ai.data.iter().zip(&bi.data))
                                .map(|(&dv, (&x, &y))| da(dv, x, y))
                                .collect();
                            accumulate_grad(&ai, &g);
                        }
                        if bi.requires_grad {
                            let g: Vec<f32> = d
                                .iter()
                                .zip(ai.data.iter().zip(&bi.data))
                                .map(|(&dv, (&x, &y))| db(dv, x, y))
                                .collect();
                            accumulate_grad(&bi, &g);
                        }
                    }
                });
            }
            Ok(out)
        }
    };
}

binary_elementwise!(add, |x, y| x + y, |d, _, _| d, |d, _, _| d);
binary_elementwise!(sub, |x, y| x - y, |d, _, _| d, |d, _, _| -d);
binary_elementwise!(mul, |x, y| x * y, |d, _, y| d * y, |d, x, _| d * x);

pub fn mul_scalar(x: &Tensor, c: f32) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| v * c).collect();
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(x.shape().to_vec(), data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let g: Vec<f32> = d.iter().map(|&v| v * c).collect();
                accumulate_grad(&xi, &g);
            }
        });
    }
    out
}

/// `out[i, :] = w[i] * x[i, :]` with constant per-row weights.
pub fn scale_rows(x: &Tensor, weights: &[f32]) -> Result<Tensor> {
    let (r, c) = rank2(x, "scale_rows")?;
    if weights.len() != r {
        return Err(Error::ShapeMismatch {
            op: "scale_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    let src = x.data();
    let mut data = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] = src[i * c + j] * weights[i];
        }
    }
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(vec![r, c], data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        let w = weights.to_vec();
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = d[i * c + j] * w[i];
                    }
                }
                accumulate_grad(&xi, &dx);
            }
        });
    }
    Ok(out)
}

/// Bias add over the last axis of a `[r, c]` tensor.
pub fn add_row_vector(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = rank2(x, "add_row_vector")?;
    if bias.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "add_row_vector",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut data = x.data().to_vec();
    let b = bias.data();
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] += b[j];
        }
    }
    let rg = is_recording() && (x.requires_grad() || bias.requires_grad());
    let out = Tensor::result(vec![r, c], data, rg);
    if rg {
        let (xi, bi, oi) = (Rc::clone(&x.inner), Rc::clone(&bias.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                if xi.requires_grad {
                    accumulate_grad(&xi, &d);
                }
                if bi.requires_grad {
                    let mut db = vec![0.0f32; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += d[i * c + j];
                        }
                    }
                    accumulate_grad(&bi, &db);
                }
            }
        });
    }
    Ok(out)
}

/// Bias add over the channel axis of a `[C, H, W]` tensor.
pub fn add_bias_chw(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (ch, hw) = match x.shape() {
        [ch, h, w] => (*ch, h * w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "add_bias_chw",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            })
        }
    };
    if bias.shape() != [ch] {
        return Err(Error::ShapeMismatch {
            op: "add_bias_chw",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut data = x.data().to_vec();
    let b = bias.data();
    for c in 0..ch {
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v += b[c];
        }
    }
    let rg = is_recording() && (x.requires_grad() || bias.requires_grad());
    let out = Tensor::result(x.shape().to_vec(), data, rg);
    if rg {
        let (xi, bi, oi) = (Rc::clone(&x.inner), Rc::clone(&bias.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                if xi.requires_grad {
                    accumulate_grad(&xi, &d);
                }
                if bi.requires_grad {
                    let mut db = vec![0.0f32; ch];
                    for c in 0..ch {
                        db[c] = d[c * hw..(c + 1) * hw].iter().sum();
                    }
                    accumulate_grad(&bi, &db);
                }
            }
        });
    }
    Ok(out)
}

/// Stack `[r_i, c]` blocks vertically.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat_rows of zero tensors".into()));
    }
    let (_, c) = rank2(&parts[0], "concat_rows")?;
    let mut rows = 0usize;
    for p in parts {
        let (r, pc) = rank2(p, "concat_rows")?;
        if pc != c {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += r;
    }
    let mut data = Vec::with_capacity(rows * c);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let rg = is_recording() && parts.iter().any(|p| p.requires_grad());
    let out = Tensor::result(vec![rows, c], data, rg);
    if rg {
        let inners: Vec<_> = parts.iter().map(|p| Rc::clone(&p.inner)).collect();
        let oi = Rc::clone(&out.inner);
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let mut offset = 0;
                for inner in &inners {
                    let len = inner.data.len();
                    if inner.requires_grad {
                        accumulate_grad(inner, &d[offset..offset + len]);
                    }
                    offset += len;
                }
            }
        });
    }
    Ok(out)
}

/// Rows `start..end` of a `[r, c]` tensor.
pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = rank2(x, "slice_rows")?;
    if start >= end || end > r {
        return Err(Error::InvalidArgument(format!(
            "slice_rows {start}..{end} out of range for {r} rows"
        )));
    }
    let data = x.data()[start * c..end * c].to_vec();
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(vec![end - start, c], data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let mut dx = vec![0.0f32; r * c];
                dx[start * c..end * c].copy_from_slice(&d);
                accumulate_grad(&xi, &dx);
            }
        });
    }
    Ok(out)
}

/// Channel `k` of a `[K, H, W]` tensor as `[H, W]`.
pub fn slice_channel(x: &Tensor, k: usize) -> Result<Tensor> {
    let (kk, h, w) = match x.shape() {
        [kk, h, w] => (*kk, *h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "slice_channel",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            })
        }
    };
    if k >= kk {
        return Err(Error::InvalidArgument(format!("channel {k} out of {kk}")));
    }
    let hw = h * w;
    let data = x.data()[k * hw..(k + 1) * hw].to_vec();
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(vec![h, w], data, rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                let mut dx = vec![0.0f32; kk * hw];
                dx[k * hw..(k + 1) * hw].copy_from_slice(&d);
                accumulate_grad(&xi, &dx);
            }
        });
    }
    Ok(out)
}

pub fn sum(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().map(|&v| v as f64).sum();
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(vec![1], vec![total as f32], rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                accumulate_grad(&xi, &vec![d[0]; xi.data.len()]);
            }
        });
    }
    out
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel().max(1);
    let total: f64 = x.data().iter().map(|&v| v as f64).sum();
    let rg = is_recording() && x.requires_grad();
    let out = Tensor::result(vec![1], vec![(total / n as f64) as f32], rg);
    if rg {
        let (xi, oi) = (Rc::clone(&x.inner), Rc::clone(&out.inner));
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                accumulate_grad(&xi, &vec![d[0] / n as f32; xi.data.len()]);
            }
        });
    }
    out
}

/// Weighted sum of scalar tensors with constant weights; the workhorse for
/// combining loss terms.
pub fn weighted_sum(terms: &[(Tensor, f32)]) -> Tensor {
    let mut total = 0.0f64;
    for (t, w) in terms {
        assert_eq!(t.numel(), 1, "weighted_sum expects scalar terms");
        total += t.item() as f64 * *w as f64;
    }
    let rg = is_recording() && terms.iter().any(|(t, _)| t.requires_grad());
    let out = Tensor::result(vec![1], vec![total as f32], rg);
    if rg {
        let inners: Vec<_> = terms.iter().map(|(t, w)| (Rc::clone(&t.inner), *w)).collect();
        let oi = Rc::clone(&out.inner);
        record_entry(&out, move || {
            if let Some(d) = out_grad(&oi) {
                for (inner, w) in &inners {
                    if inner.requires_grad {
                        accumulate_grad(inner, &[d[0] * w]);
                    }
                }
            }
        });
    }
    out
}

//! Independent reference implementations used as test oracles.
//!
//! Everything here is written as plain scalar loops in f64, deliberately
//! sharing no code with the optimized paths it is used to check.

/// `[m,k] x [k,n]` by the textbook triple loop.
pub fn matmul_f64(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// erf by its Maclaurin series, good to ~1e-14 for |x| <= 4.
pub fn erf_series(x: f64) -> f64 {
    if x < 0.0 {
        return -erf_series(-x);
    }
    if x > 4.0 {
        return 1.0;
    }
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-17 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Direct convolution, scalar loops, f64 accumulation.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_f64(
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
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (width + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= width as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * width + ix as usize] as f64
                                * w[((co * cin + ci) * kh + ki) * kw + kj] as f64;
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Uniform symmetric quantization, independent rounding logic: the tie case
/// is resolved by explicit floor/ceil parity instead of `round_ties_even`.
pub fn quantize_ref(x: f32, bits: u32, scale: f64) -> i64 {
    let y = x as f64 / scale;
    let floor = y.floor();
    let frac = y - floor;
    let rounded = if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if (floor as i64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    };
    let lo = -(2f64.powi(bits as i32 - 1));
    let hi = 2f64.powi(bits as i32 - 1) - 1.0;
    rounded.clamp(lo, hi) as i64
}

/// KL divergence of two Bernoulli distributions with parameters p, q.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// KL divergence of two discrete distributions.
pub fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 }).sum()
}

/// Exact squared Euclidean distance to the nearest `false` pixel, O(N^2).
/// Pixels outside the image count as `false`.
pub fn distance_sq_bruteforce(region: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            if !region[y * w + x] {
                continue;
            }
            // Nearest boundary beyond the image edges.
            let edge = (x + 1).min(y + 1).min(w - x).min(h - y) as f64;
            let mut best = edge * edge;
            for yy in 0..h {
                for xx in 0..w {
                    if !region[yy * w + xx] {
                        let dy = y as f64 - yy as f64;
                        let dx = x as f64 - xx as f64;
                        best = best.min(dx * dx + dy * dy);
                    }
                }
            }
            out[y * w + x] = best;
        }
    }
    out
}

/// Central finite differences of `f` around `x` (h applied in f32 coords,
/// objective evaluated by the caller-supplied closure).
pub fn central_diff(f: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], h: f32) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h as f64);
    }
    grad
}

/// Guarded relative error between an analytic and a reference gradient.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

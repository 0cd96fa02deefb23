use super::optim::Adam;
use super::*;
use crate::reference;
use crate::rng::sub_rng;
use rand::Rng;

const FD_H: f32 = 1e-3;
const FD_TOL: f64 = 1e-3;

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Gradient check harness: runs `forward` under a tape, backs up from a
/// random-weighted sum of the output, and compares the input gradient against
/// central finite differences of the f64 `oracle`.
fn grad_check(
    seed: u64,
    x0: &[f32],
    forward: impl Fn(&Tensor) -> Tensor,
    oracle: impl Fn(&[f32]) -> Vec<f64>,
) {
    let mut wrng = sub_rng(seed, 0xAB);
    let probe_out = oracle(x0);
    let weights: Vec<f64> = (0..probe_out.len()).map(|_| wrng.gen_range(-1.0..1.0)).collect();

    let x = Tensor::param(&[x0.len()], x0.to_vec());
    let tape = Tape::new();
    let loss = tape.record(|| {
        let y = forward(&x);
        let w: Vec<f32> = weights.iter().map(|&w| w as f32).collect();
        let yw = mul(&y, &Tensor::new(y.shape(), {
            // broadcast the flat weight list onto the output shape
            assert_eq!(y.numel(), w.len());
            w
        }))
        .unwrap();
        sum(&yw)
    });
    tape.backward(&loss).unwrap();
    let analytic = x.grad().expect("input gradient missing");

    let mut objective = |vals: &[f32]| -> f64 {
        oracle(vals).iter().zip(&weights).map(|(y, w)| y * w).sum()
    };
    let fd = reference::central_diff(&mut objective, x0, FD_H);
    for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
        let err = reference::rel_err(a as f64, f);
        assert!(
            err < FD_TOL,
            "coordinate {i}: analytic {a} vs fd {f} (rel err {err:.2e}, seed {seed})"
        );
    }
}

#[test]
fn matmul_identity() {
    let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let out = matmul(&i2, &i2).unwrap();
    assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);

    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let out = matmul(&a, &i2).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 1);
        let a0 = rand_vec(&mut rng, 12, -2.0, 2.0);
        let b0 = rand_vec(&mut rng, 8, -2.0, 2.0);
        // Check gradient w.r.t. A with B fixed.
        let b_fixed = b0.clone();
        grad_check(
            seed,
            &a0,
            |x| {
                let xm = reshape(x, &[3, 4]).unwrap();
                let b = Tensor::new(&[4, 2], b_fixed.clone());
                reshape(&matmul(&xm, &b).unwrap(), &[6]).unwrap()
            },
            |vals| reference::matmul_f64(vals, &b_fixed, 3, 4, 2),
        );
        // And w.r.t. B with A fixed.
        let a_fixed = a0.clone();
        grad_check(
            seed,
            &b0,
            |x| {
                let a = Tensor::new(&[3, 4], a_fixed.clone());
                let xm = reshape(x, &[4, 2]).unwrap();
                reshape(&matmul(&a, &xm).unwrap(), &[6]).unwrap()
            },
            |vals| reference::matmul_f64(&a_fixed, vals, 3, 4, 2),
        );
    }
}

#[test]
fn softmax_symmetry_and_stability() {
    let out = softmax(&Tensor::new(&[2], vec![0.0, 0.0])).unwrap();
    assert_eq!(out.data(), &[0.5, 0.5]);

    let big = softmax(&Tensor::new(&[2], vec![1000.0, 0.0])).unwrap();
    assert!(big.data()[0] > 0.999999 && big.data()[0].is_finite());
    assert!(big.data()[1] < 1e-6);
}

#[test]
fn softmax_rows_sum_to_one() {
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 2);
        let x = Tensor::new(&[4, 7], rand_vec(&mut rng, 28, -30.0, 30.0));
        let p = softmax(&x).unwrap();
        for r in 0..4 {
            let s: f32 = p.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
            assert!(p.data()[r * 7..(r + 1) * 7].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 3);
        let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
        grad_check(
            seed,
            &x0,
            |x| softmax(x).unwrap(),
            |vals| reference::softmax_f64(vals),
        );
    }
}

#[test]
fn gelu_values() {
    let out = gelu(&Tensor::new(&[1], vec![0.0]));
    assert_eq!(out.data()[0], 0.0);

    let big = gelu(&Tensor::new(&[2], vec![20.0, -20.0]));
    assert!((big.data()[0] - 20.0).abs() < 1e-5);
    assert!(big.data()[1].abs() < 1e-6);

    // Value at 1.0 against the series-expansion erf oracle.
    let one = gelu(&Tensor::new(&[1], vec![1.0]));
    let expected = reference::gelu_f64(1.0);
    assert!(
        (one.data()[0] as f64 - expected).abs() < 1e-6,
        "gelu(1) = {} vs oracle {expected}",
        one.data()[0]
    );
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 4);
        let x0 = rand_vec(&mut rng, 9, -3.0, 3.0);
        grad_check(
            seed,
            &x0,
            |x| gelu(x),
            |vals| vals.iter().map(|&v| reference::gelu_f64(v as f64)).collect(),
        );
    }
}

#[test]
fn sigmoid_center_and_open_interval() {
    let out = sigmoid(&Tensor::new(&[1], vec![0.0]));
    assert_eq!(out.data()[0], 0.5);

    let extreme = sigmoid(&Tensor::new(&[4], vec![-200.0, -40.0, 40.0, 200.0]));
    for &v in extreme.data() {
        assert!(v > 0.0 && v < 1.0, "sigmoid output {v} not strictly inside (0,1)");
    }
}

#[test]
fn sigmoid_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 5);
        let x0 = rand_vec(&mut rng, 8, -4.0, 4.0);
        grad_check(
            seed,
            &x0,
            |x| sigmoid(x),
            |vals| vals.iter().map(|&v| reference::sigmoid_f64(v as f64)).collect(),
        );
    }
}

#[test]
fn layernorm_constant_vector_is_zero_before_affine() {
    let x = Tensor::new(&[1, 5], vec![3.25; 5]);
    let g = Tensor::new(&[5], vec![1.0; 5]);
    let b = Tensor::new(&[5], vec![0.0; 5]);
    let out = layernorm(&x, &g, &b, 1e-5).unwrap();
    for &v in out.data() {
        assert!(v.abs() < 1e-6, "constant row should normalize to ~0, got {v}");
    }
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let ln_oracle = |vals: &[f32]| -> Vec<f64> {
        let n = vals.len();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        vals.iter().map(|&v| (v as f64 - mean) / (var + 1e-5f32 as f64).sqrt()).collect()
    };
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 6);
        let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
        grad_check(
            seed,
            &x0,
            |x| {
                let xm = reshape(x, &[1, 6]).unwrap();
                let g = Tensor::new(&[6], vec![1.0; 6]);
                let b = Tensor::new(&[6], vec![0.0; 6]);
                reshape(&layernorm(&xm, &g, &b, 1e-5).unwrap(), &[6]).unwrap()
            },
            |vals| ln_oracle(vals),
        );
    }
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    // 1x1x5x5 input, 3x3 kernel, as well as a strided multichannel case.
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 7);
        let x0 = rand_vec(&mut rng, 25, -1.5, 1.5);
        let w0 = rand_vec(&mut rng, 9, -1.0, 1.0);
        let w_fixed = w0.clone();
        grad_check(
            seed,
            &x0,
            |x| {
                let xm = reshape(x, &[1, 5, 5]).unwrap();
                let w = Tensor::new(&[1, 1, 3, 3], w_fixed.clone());
                let y = conv2d(&xm, &w, 1, 1).unwrap();
                reshape(&y, &[25]).unwrap()
            },
            |vals| reference::conv2d_f64(vals, &w_fixed, 1, 5, 5, 1, 3, 3, 1, 1),
        );
        let x_fixed = x0.clone();
        grad_check(
            seed,
            &w0,
            |w| {
                let x = Tensor::new(&[1, 5, 5], x_fixed.clone());
                let wm = reshape(w, &[1, 1, 3, 3]).unwrap();
                let y = conv2d(&x, &wm, 2, 1).unwrap();
                reshape(&y, &[9]).unwrap()
            },
            |vals| reference::conv2d_f64(&x_fixed, vals, 1, 5, 5, 1, 3, 3, 2, 1),
        );
    }
}

#[test]
fn upsample_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 8);
        let x0 = rand_vec(&mut rng, 16, -2.0, 2.0);
        grad_check(
            seed,
            &x0,
            |x| {
                let xm = reshape(x, &[1, 4, 4]).unwrap();
                reshape(&upsample2x_bilinear(&xm).unwrap(), &[64]).unwrap()
            },
            |vals| {
                // oracle: direct bilinear with half-pixel centers in f64
                let (h, w) = (4usize, 4usize);
                let mut out = vec![0.0f64; 64];
                for oy in 0..8 {
                    for ox in 0..8 {
                        let py = (oy as f64 + 0.5) / 2.0 - 0.5;
                        let px = (ox as f64 + 0.5) / 2.0 - 0.5;
                        let y0 = py.floor().max(0.0).min(h as f64 - 1.0) as usize;
                        let x0i = px.floor().max(0.0).min(w as f64 - 1.0) as usize;
                        let y1 = (py.floor() + 1.0).max(0.0).min(h as f64 - 1.0) as usize;
                        let x1 = (px.floor() + 1.0).max(0.0).min(w as f64 - 1.0) as usize;
                        let ty = py - py.floor();
                        let tx = px - px.floor();
                        let v00 = vals[y0 * w + x0i] as f64;
                        let v01 = vals[y0 * w + x1] as f64;
                        let v10 = vals[y1 * w + x0i] as f64;
                        let v11 = vals[y1 * w + x1] as f64;
                        let top = v00 + (v01 - v00) * tx;
                        let bot = v10 + (v11 - v10) * tx;
                        out[oy * 8 + ox] = top + (bot - top) * ty;
                    }
                }
                out
            },
        );
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = sub_rng(seed, 9);
        let z0 = rand_vec(&mut rng, 12, -3.0, 3.0);
        let target: Vec<f32> = (0..12).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();

        let t = target.clone();
        grad_check(
            seed,
            &z0,
            |z| bce_with_logits(z, &t).unwrap(),
            |vals| {
                let total: f64 = vals
                    .iter()
                    .zip(&t)
                    .map(|(&z, &y)| {
                        let p = reference::sigmoid_f64(z as f64);
                        -(y as f64) * p.ln() - (1.0 - y as f64) * (1.0 - p).ln()
                    })
                    .sum();
                vec![total / vals.len() as f64]
            },
        );

        let t = target.clone();
        grad_check(
            seed,
            &z0,
            |z| focal_loss(z, &t, 0.25, 2.0).unwrap(),
            |vals| {
                let total: f64 = vals
                    .iter()
                    .zip(&t)
                    .map(|(&z, &y)| {
                        let p = reference::sigmoid_f64(z as f64);
                        let (pt, at) =
                            if y > 0.5 { (p, 0.25f64) } else { (1.0 - p, 0.75f64) };
                        -at * (1.0 - pt).powi(2) * pt.ln()
                    })
                    .sum();
                vec![total / vals.len() as f64]
            },
        );

        let t = target.clone();
        grad_check(
            seed,
            &z0,
            |z| soft_dice_loss(z, &t).unwrap(),
            |vals| {
                let probs: Vec<f64> =
                    vals.iter().map(|&z| reference::sigmoid_f64(z as f64)).collect();
                let num: f64 =
                    2.0 * probs.iter().zip(&t).map(|(&p, &y)| p * y as f64).sum::<f64>();
                let den: f64 = probs.iter().sum::<f64>()
                    + t.iter().map(|&y| y as f64).sum::<f64>();
                vec![1.0 - num / den]
            },
        );

        let b_fixed = rand_vec(&mut rng, 12, -3.0, 3.0);
        let b = b_fixed.clone();
        grad_check(
            seed,
            &z0,
            |z| l1_loss(z, &Tensor::new(&[12], b.clone())).unwrap(),
            |vals| {
                let total: f64 = vals
                    .iter()
                    .zip(&b_fixed)
                    .map(|(&x, &y)| ((x - y).abs()) as f64)
                    .sum();
                vec![total / 12.0]
            },
        );
    }
}

#[test]
fn backward_of_sum_is_ones_and_of_square_is_2x() {
    let x = Tensor::param(&[4], vec![1.0, -2.0, 3.0, 0.5]);
    let tape = Tape::new();
    let loss = tape.record(|| sum(&x));
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

    let x = Tensor::param(&[4], vec![1.0, -2.0, 3.0, 0.5]);
    let tape = Tape::new();
    let loss = tape.record(|| sum(&mul(&x, &x).unwrap()));
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached_and_repeat() {
    let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]);
    let tape = Tape::new();
    let y = tape.record(|| mul(&x, &x).unwrap());
    assert!(matches!(
        tape.backward(&y),
        Err(crate::Error::NonScalarLoss { .. })
    ));

    // A loss never recorded on this tape.
    let stray = Tensor::param(&[1], vec![1.0]);
    assert!(matches!(tape.backward(&stray), Err(crate::Error::DetachedGraph)));

    let s = tape.record(|| sum(&y));
    tape.backward(&s).unwrap();
    assert!(matches!(tape.backward(&s), Err(crate::Error::TapeConsumed)));
}

#[test]
fn no_grad_suppresses_recording() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]);
    let tape = Tape::new();
    let loss = tape.record(|| {
        let silent = no_grad(|| mul(&x, &x).unwrap());
        assert!(!silent.requires_grad());
        sum(&mul(&x, &silent.detach()).unwrap())
    });
    assert_eq!(tape.num_ops(), 2);
    tape.backward(&loss).unwrap();
    // silent acts as a constant: d/dx (x * c) = c = x^2 evaluated at x0
    assert_eq!(x.grad().unwrap(), vec![1.0, 4.0]);
}

#[test]
fn gradient_accumulates_over_multiple_uses() {
    let x = Tensor::param(&[1], vec![3.0]);
    let tape = Tape::new();
    let loss = tape.record(|| {
        let a = mul(&x, &x).unwrap(); // x^2
        let b = mul_scalar(&x, 5.0); // 5x
        sum(&add(&a, &b).unwrap())
    });
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0 * 3.0 + 5.0]);
}

#[test]
fn forward_is_deterministic_bit_identical() {
    let mut rng = sub_rng(7, 10);
    let vals = rand_vec(&mut rng, 64, -2.0, 2.0);
    let x = Tensor::new(&[8, 8], vals.clone());
    let y = Tensor::new(&[8, 8], vals);
    let run = |t: &Tensor| {
        let s = softmax(&matmul(t, t).unwrap()).unwrap();
        gelu(&s).data().to_vec()
    };
    assert_eq!(run(&x), run(&y));
}

#[test]
fn weighted_sum_combines_scalars() {
    let a = Tensor::param(&[1], vec![2.0]);
    let b = Tensor::param(&[1], vec![3.0]);
    let tape = Tape::new();
    let loss = tape.record(|| weighted_sum(&[(a.clone(), 0.5), (b.clone(), 2.0)]));
    assert_eq!(loss.item(), 7.0);
    tape.backward(&loss).unwrap();
    assert_eq!(a.grad().unwrap(), vec![0.5]);
    assert_eq!(b.grad().unwrap(), vec![2.0]);
}

#[test]
fn adam_descends_a_quadratic() {
    let mut p = Tensor::param(&[2], vec![5.0, -4.0]);
    let mut opt = Adam::new(0.1);
    for _ in 0..200 {
        let tape = Tape::new();
        let loss = tape.record(|| sum(&mul(&p, &p).unwrap()));
        tape.backward(&loss).unwrap();
        let mut params = [&mut p];
        opt.step(&mut params);
    }
    assert!(p.data().iter().all(|v| v.abs() < 0.05), "{:?}", p.data());
}

#[test]
fn erf_matches_series_oracle() {
    for i in -40..=40 {
        let x = i as f64 * 0.1;
        let got = erf(x);
        let want = reference::erf_series(x);
        assert!((got - want).abs() < 2e-7, "erf({x}): {got} vs {want}");
    }
}

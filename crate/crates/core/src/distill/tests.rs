use super::*;
use crate::data::{generate_dataset, SceneSpec};
use crate::model::{ModelConfig, Variant};
use crate::reference;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        teacher_channels: vec![12, 16],
        student_channels: vec![6, 8],
        embed_dim: 16,
        attn_dim: 8,
        mlp_dim: 32,
        mask_channels: 8,
        ..ModelConfig::default()
    }
}

fn tiny_scene_spec() -> SceneSpec {
    SceneSpec { image_size: 32, max_objects: 2, ..SceneSpec::default() }
}

fn tiny_distill_cfg() -> DistillConfig {
    DistillConfig {
        prompts_per_iter: 2,
        max_sampling_round: 2,
        epochs: 1,
        ..DistillConfig::default()
    }
}

fn decoder_pair(seed: u64) -> (DecoderOutput, DecoderOutput) {
    let cfg = tiny_cfg();
    let teacher = SegModel::new(&cfg, Variant::Teacher, seed).unwrap();
    let student = SegModel::new(&cfg, Variant::Student, seed + 1).unwrap();
    let scene = crate::data::generate_scene(&tiny_scene_spec(), seed as usize);
    let prompts = PromptSet::single_point(10.0, 10.0);
    let t = teacher
        .decode_mask(&teacher.encode_image(&scene.image).unwrap(), &prompts)
        .unwrap();
    let s = student
        .decode_mask(&student.encode_image(&scene.image).unwrap(), &prompts)
        .unwrap();
    (t, s)
}

#[test]
fn l1_losses_zero_on_identical_and_offset_by_constant() {
    let (t, _) = decoder_pair(0);
    assert_eq!(token_loss(&t, &t).unwrap().item(), 0.0);
    assert_eq!(output_loss(&t, &t).unwrap().item(), 0.0);

    let emb = Tensor::new(&[4, 4], (0..16).map(|i| i as f32 * 0.25).collect());
    assert_eq!(embedding_loss(&emb, &emb).unwrap().item(), 0.0);
    let shifted = Tensor::new(&[4, 4], emb.data().iter().map(|v| v + 0.75).collect());
    let loss = embedding_loss(&emb, &shifted).unwrap().item();
    assert!((loss - 0.75).abs() < 1e-6, "constant offset must give |c|, got {loss}");

    // Offsetting every mask logit and IoU by c gives exactly |c| too.
    let off = DecoderOutput {
        masks: Tensor::new(t.masks.shape(), t.masks.data().iter().map(|v| v - 0.5).collect()),
        ious: Tensor::new(t.ious.shape(), t.ious.data().iter().map(|v| v - 0.5).collect()),
        tokens: t.tokens.clone(),
    };
    let out = output_loss(&t, &off).unwrap().item();
    assert!((out - 0.5).abs() < 1e-6, "got {out}");
}

#[test]
fn output_loss_matches_scalar_oracle() {
    let (t, s) = decoder_pair(3);
    let got = output_loss(&t, &s).unwrap().item() as f64;
    let mut acc = 0.0f64;
    for (a, b) in t.masks.data().iter().zip(s.masks.data()) {
        acc += (a - b).abs() as f64;
    }
    for (a, b) in t.ious.data().iter().zip(s.ious.data()) {
        acc += (a - b).abs() as f64;
    }
    let want = acc / (t.masks.numel() + t.ious.numel()) as f64;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn token_loss_matches_scalar_oracle() {
    let (t, s) = decoder_pair(4);
    let got = token_loss(&t, &s).unwrap().item() as f64;
    let want: f64 = t
        .tokens
        .data()
        .iter()
        .zip(s.tokens.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / t.tokens.numel() as f64;
    assert!((got - want).abs() < 1e-6);
}

fn row_mask(width: usize, set: usize) -> Mask {
    let mut m = Mask::empty(width, 1);
    for i in 0..set {
        m.pixels[i] = true;
    }
    m
}

#[test]
fn hardness_values_match_direct_evaluation() {
    // Equal IoUs: ratio 1, sigmoid(0) = 0.5.
    let gt = row_mask(100, 100);
    let half = row_mask(100, 50);
    let h = mask_hardness(&half, &half, &gt, 1e-9).unwrap();
    assert!((h - 0.5).abs() < 1e-5, "{h}");

    // Teacher IoU 0.9, student IoU 0.45: sigmoid(1) = 0.7311.
    let t = row_mask(100, 90);
    let s = row_mask(100, 45);
    let h = mask_hardness(&t, &s, &gt, 1e-9).unwrap();
    assert!((h - 0.731_058_6).abs() < 1e-4, "{h}");

    // Student perfect, teacher disjoint: ratio 0, sigmoid(-1) = 0.2689.
    let mut t_disjoint = Mask::empty(100, 1);
    t_disjoint.pixels[0] = false; // fully empty prediction
    let h = mask_hardness(&t_disjoint, &gt, &gt, 1e-9).unwrap();
    assert!((h - 0.268_941_4).abs() < 1e-4, "{h}");
}

#[test]
fn hardness_stays_in_open_unit_interval_and_monotone() {
    let gt = row_mask(100, 100);
    let mut last = 0.0f32;
    for k in 0..=100usize {
        let t = row_mask(100, k.max(1));
        let s = row_mask(100, 50);
        let h = mask_hardness(&t, &s, &gt, 1e-4).unwrap();
        assert!(h > 0.0 && h < 1.0);
        if k > 0 {
            assert!(h >= last, "hardness must grow with teacher IoU");
        }
        last = h;
    }
}

#[test]
fn distill_loss_zero_weights_and_eq4_degeneracy() {
    let emb = Tensor::scalar(0.3);
    let tok = Tensor::scalar(0.7);
    let outs = vec![Tensor::scalar(0.2), Tensor::scalar(0.4)];

    let mut cfg = DistillConfig::default();
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.gamma = 0.0;
    let v = distill_loss(&emb, &tok, &outs, &[1.0, 1.0], &cfg).unwrap().item();
    assert_eq!(v, 0.0);

    // All hardness 1 with summed outputs reduces to alpha*e + beta*t + gamma*sum(out).
    let mut cfg = DistillConfig {
        alpha: 0.5,
        beta: 2.0,
        gamma: 1.5,
        output_reduction: OutputReduction::Sum,
        ..DistillConfig::default()
    };
    let v = distill_loss(&emb, &tok, &outs, &[1.0, 1.0], &cfg).unwrap().item();
    let want = 0.5 * 0.3 + 2.0 * 0.7 + 1.5 * (0.2 + 0.4);
    assert!((v - want).abs() < 1e-6, "{v} vs {want}");

    // Hand-computed weighted two-mask case.
    cfg.hardness_enabled = true;
    let v = distill_loss(&emb, &tok, &outs, &[0.6, 0.9], &cfg).unwrap().item();
    let want = 0.5 * 0.3 + 2.0 * 0.7 + 1.5 * (0.6 * 0.2 + 0.9 * 0.4);
    assert!((v - want).abs() < 1e-6, "{v} vs {want}");

    // Hardness count must match output losses.
    assert!(distill_loss(&emb, &tok, &outs, &[1.0], &cfg).is_err());
}

#[test]
fn gt_loss_near_zero_for_perfect_prediction() {
    let mut gt = Mask::empty(8, 8);
    for i in 20..44 {
        gt.pixels[i] = true;
    }
    let logits: Vec<f32> = gt.pixels.iter().map(|&p| if p { 30.0 } else { -30.0 }).collect();
    let mut mask_data = logits.clone();
    mask_data.extend(vec![-30.0; 128]); // channels 1 and 2 predict nothing
    let out = DecoderOutput {
        masks: Tensor::new(&[3, 8, 8], mask_data),
        ious: Tensor::new(&[3], vec![1.0, 0.0, 0.0]),
        tokens: Tensor::zeros(&[4, 8]),
    };
    let cfg = DistillConfig::default();
    let v = gt_loss(&out, &gt, &cfg).unwrap().item();
    assert!(v < 1e-3, "perfect prediction should cost ~0, got {v}");

    assert!(gt_loss(&out, &Mask::empty(8, 8), &cfg).is_err(), "empty gt must error");
}

#[test]
fn dice_of_disjoint_prediction_is_one() {
    let mut gt = vec![0.0f32; 16];
    gt[0] = 1.0;
    gt[1] = 1.0;
    let mut logits = vec![-30.0f32; 16];
    logits[10] = 30.0;
    logits[11] = 30.0;
    let v = crate::tensor::soft_dice_loss(&Tensor::new(&[16], logits), &gt).unwrap().item();
    assert!((v - 1.0).abs() < 1e-5, "{v}");
}

#[test]
fn gt_loss_matches_per_pixel_oracle() {
    let (_, s) = decoder_pair(7);
    let mut gt = Mask::empty(32, 32);
    for y in 8..20 {
        for x in 8..24 {
            gt.pixels[y * 32 + x] = true;
        }
    }
    let cfg = DistillConfig::default();
    let got = gt_loss(&s, &gt, &cfg).unwrap().item() as f64;

    // Scalar-loop oracle over the selected channel.
    let (k, _) = crate::model::select_best_mask(&s);
    let hw = 32 * 32;
    let logits = &s.masks.data()[k * hw..(k + 1) * hw];
    let mut focal = 0.0f64;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut tsum = 0.0f64;
    let mut inter_bin = 0usize;
    let mut union_bin = 0usize;
    for (i, &z) in logits.iter().enumerate() {
        let y = if gt.pixels[i] { 1.0f64 } else { 0.0 };
        let p = reference::sigmoid_f64(z as f64);
        let (pt, at) = if y > 0.5 { (p, 0.25) } else { (1.0 - p, 0.75) };
        focal += -at * (1.0 - pt).powi(2) * pt.ln();
        inter += p * y;
        psum += p;
        tsum += y;
        let bin = z > 0.0;
        inter_bin += (bin && gt.pixels[i]) as usize;
        union_bin += (bin || gt.pixels[i]) as usize;
    }
    focal /= hw as f64;
    let dice = 1.0 - 2.0 * inter / (psum + tsum);
    let actual_iou = if union_bin == 0 { 1.0 } else { inter_bin as f64 / union_bin as f64 };
    let iou_term = (s.ious.data()[k] as f64 - actual_iou).abs();
    let want = 20.0 * focal + dice + iou_term;
    assert!((got - want).abs() < 2e-4, "{got} vs {want}");
}

#[test]
fn hps_round_zero_is_single_point_inside_gt() {
    let cfg = tiny_cfg();
    let model = SegModel::new(&cfg, Variant::Student, 0).unwrap();
    let scene = crate::data::generate_scene(&tiny_scene_spec(), 1);
    let gt = &scene.gt_masks[0];
    let mut rng = sub_rng(42, 0);
    let emb = model.encode_image(&scene.image).unwrap();
    let p = hard_prompt_sample_with_emb(&model, &emb, gt, 0, &mut rng).unwrap();
    assert_eq!(p.points.len(), 1);
    assert!(p.boxes.is_empty());
    let pt = p.points[0];
    assert!(gt.get(pt.x as usize, pt.y as usize));
}

#[test]
fn hps_membership_invariant_every_round_every_seed() {
    let cfg = tiny_cfg();
    let model = SegModel::new(&cfg, Variant::Student, 3).unwrap();
    let scene = crate::data::generate_scene(&tiny_scene_spec(), 2);
    let gt = &scene.gt_masks[0];
    let emb = model.encode_image(&scene.image).unwrap();
    for seed in 0..6u64 {
        for round in 0..=4usize {
            let mut rng = sub_rng(seed, 9);
            let prompts = hard_prompt_sample_with_emb(&model, &emb, gt, round, &mut rng).unwrap();
            assert_eq!(prompts.points.len(), round + 1);
            // Every point lies inside gt.
            for pt in &prompts.points {
                assert!(gt.get(pt.x as usize, pt.y as usize), "point outside gt");
            }
            // Replay: point j+1 must avoid prediction from the first j+1 points
            // whenever the difference set was nonempty.
            for j in 0..round {
                let prefix = PromptSet { points: prompts.points[..=j].to_vec(), boxes: vec![] };
                let out = model.decode_mask(&emb, &prefix).unwrap();
                let pred = crate::eval::best_mask_binary(&out);
                let diff_nonempty =
                    gt.pixels.iter().zip(&pred.pixels).any(|(&g, &p)| g && !p);
                if diff_nonempty {
                    let pt = prompts.points[j + 1];
                    assert!(
                        !pred.get(pt.x as usize, pt.y as usize),
                        "seed {seed} round {round}: point {j} inside predicted mask"
                    );
                }
            }
        }
    }
}

#[test]
fn zero_epochs_leaves_student_bit_identical() {
    let cfg = tiny_cfg();
    let teacher = SegModel::new(&cfg, Variant::Teacher, 0).unwrap();
    let mut student = SegModel::new(&cfg, Variant::Student, 1).unwrap();
    let before: Vec<Vec<f32>> =
        student.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let samples = generate_dataset(&tiny_scene_spec(), 2).unwrap();
    let cfg_d = DistillConfig { epochs: 0, ..tiny_distill_cfg() };
    let log = train_student(&teacher, &mut student, &samples, &cfg_d).unwrap();
    assert!(log.records.is_empty());
    let after: Vec<Vec<f32>> =
        student.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn same_seed_gives_identical_history_and_teacher_untouched() {
    let cfg = tiny_cfg();
    let teacher = SegModel::new(&cfg, Variant::Teacher, 0).unwrap();
    let teacher_before: Vec<Vec<f32>> =
        teacher.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let samples = generate_dataset(&tiny_scene_spec(), 3).unwrap();

    let run = || {
        let mut student = SegModel::new(&cfg, Variant::Student, 1).unwrap();
        train_student(&teacher, &mut student, &samples, &tiny_distill_cfg()).unwrap()
    };
    let log1 = run();
    let log2 = run();
    assert_eq!(log1.records, log2.records);
    assert!(!log1.records.is_empty());

    let teacher_after: Vec<Vec<f32>> =
        teacher.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(teacher_before, teacher_after);
}

#[test]
fn nan_weights_abort_with_term_name() {
    let cfg = tiny_cfg();
    let teacher = SegModel::new(&cfg, Variant::Teacher, 0).unwrap();
    let mut student = SegModel::new(&cfg, Variant::Student, 1).unwrap();
    {
        let mut params = student.params_mut();
        let shape = params[0].shape().to_vec();
        **params.first_mut().unwrap() = Tensor::param(&shape, vec![f32::NAN; shape.iter().product()]);
    }
    let samples = generate_dataset(&tiny_scene_spec(), 1).unwrap();
    let err = train_student(&teacher, &mut student, &samples, &tiny_distill_cfg()).unwrap_err();
    match err {
        Error::NonFiniteLoss { term, .. } => {
            assert!(!term.is_empty());
        }
        other => panic!("expected NonFiniteLoss, got {other}"),
    }
}

#[test]
fn capacity_invariant_enforced() {
    let cfg = tiny_cfg();
    // Swap roles: "teacher" is the small variant.
    let teacher = SegModel::new(&cfg, Variant::Student, 0).unwrap();
    let mut student = SegModel::new(&cfg, Variant::Teacher, 1).unwrap();
    let samples = generate_dataset(&tiny_scene_spec(), 1).unwrap();
    assert!(train_student(&teacher, &mut student, &samples, &tiny_distill_cfg()).is_err());
}

#[test]
fn embedding_cache_roundtrip() {
    let cfg = tiny_cfg();
    let teacher = SegModel::new(&cfg, Variant::Teacher, 0).unwrap();
    let samples = generate_dataset(&tiny_scene_spec(), 3).unwrap();
    let embs = precompute_teacher_embeddings(&teacher, &samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.cache");
    save_embedding_cache(&path, &embs).unwrap();
    let back = load_embedding_cache(&path).unwrap();
    assert_eq!(back.len(), embs.len());
    for (a, b) in embs.iter().zip(&back) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), b.shape());
    }
}

#[test]
fn single_epoch_reduces_smoothed_loss() {
    let cfg = tiny_cfg();
    let teacher = SegModel::new(&cfg, Variant::Teacher, 0).unwrap();
    let mut student = SegModel::new(&cfg, Variant::Student, 1).unwrap();
    let samples = generate_dataset(&tiny_scene_spec(), 10).unwrap();
    let cfg_d = DistillConfig {
        epochs: 2,
        prompts_per_iter: 3,
        max_sampling_round: 1,
        ..DistillConfig::default()
    };
    let log = train_student(&teacher, &mut student, &samples, &cfg_d).unwrap();
    let smoothed = log.smoothed(5);
    assert!(
        smoothed.last().unwrap() < smoothed.first().unwrap(),
        "loss should trend down: first {} last {}",
        smoothed.first().unwrap(),
        smoothed.last().unwrap()
    );
}

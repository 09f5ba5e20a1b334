//! Acceptance gate. One test per release criterion, each printing a single
//! pass/fail line with the measured values next to its stated tolerance.

mod common;

use std::time::Instant;

use common::*;
use csrtd::attention::{conv_attn, cross_attn, factor_attn, AttnWeights, TokenSeq};
use csrtd::dataset::{build_dataset, load_split, worker_count, SplitSpec};
use csrtd::fusion::Ablation;
use csrtd::gradcheck::{
    model_fd_spot_check, primitive_checks, MODEL_TOL, PRIMITIVE_TOL,
};
use csrtd::image_ops::correlate;
use csrtd::loss::{onehot, soft_dice, LossWeights, DICE_EPSILON};
use csrtd::metrics::{
    confusion, f1, iou, pixel_difference_baseline, precision, recall, tune_theta, EvalAccum,
};
use csrtd::model::{audit_shapes, ModelConfig, RtdModel};
use csrtd::param::count_params;
use csrtd::tensor::Tensor;
use csrtd::train::{
    evaluate_checkpoint, load_checkpoint, save_checkpoint, train, EarlyStopping, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor_of(m: &Mat) -> Tensor<f64> {
    Tensor::from_vec(&[m.len(), m[0].len()], mat_to_flat(m)).unwrap()
}

fn tensor_of_img(img: &[Vec<Vec<f64>>]) -> Tensor<f64> {
    Tensor::from_vec(&[img.len(), img[0].len(), img[0][0].len()], flat3(img)).unwrap()
}

fn rand_img(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<Vec<Vec<f64>>> {
    (0..c)
        .map(|_| (0..h).map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_paper_shape_audit() {
    let t0 = Instant::now();
    let cfg = ModelConfig::paper();
    let audit = audit_shapes(&cfg, 0).unwrap();
    assert!(audit.mismatches.is_empty(), "mismatches: {:?}", audit.mismatches);
    let expect: &[(&str, &[usize])] = &[
        ("h_goal1", &[64, 64, 64]),
        ("h_goal2", &[128, 32, 32]),
        ("h_goal3", &[320, 16, 16]),
        ("h_goal4", &[512, 8, 8]),
        ("h_cur1", &[64, 64, 64]),
        ("h_cur2", &[128, 32, 32]),
        ("h_cur3", &[320, 16, 16]),
        ("h_cur4", &[512, 8, 8]),
        ("z1", &[128, 64, 64]),
        ("z2", &[320, 32, 32]),
        ("z3", &[1088, 16, 16]),
        ("z4", &[1344, 8, 8]),
        ("u1", &[32, 256, 256]),
        ("logits", &[2, 256, 256]),
    ];
    for (name, shape) in expect {
        let got = audit
            .trace
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("trace entry {name} missing"));
        assert_eq!(got.1.as_slice(), *shape, "{name}");
    }
    assert_eq!(cfg.z_channels(), vec![128, 320, 1088, 1344]);
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget 60s");
    println!(
        "criterion 1: PASS — paper pyramid, fused channels [128, 320, 1088, 1344], \
         u1 (32,256,256), logits (2,256,256) all match in {secs:.1}s \
         (note: stage-2 fused width audits at 320 = 64 + 2*128; a 384 figure would \
         require the stage-1 skip to bypass its downsample, contradicting the \
         downsample output type)"
    );
}

#[test]
fn criterion_2_parameter_count_band() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = RtdModel::<f32>::new(ModelConfig::paper(), &mut rng).unwrap();
    let n = count_params(&model);
    assert!(
        (20_000_000..=30_000_000).contains(&n),
        "paper-config parameter count {n} outside 20M-30M"
    );
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget 60s");
    println!("criterion 2: PASS — paper config has {n} trainable parameters (band 20M-30M) in {secs:.1}s");
}

#[test]
fn criterion_3_gradient_suite() {
    let t0 = Instant::now();
    let mut worst_primitive = 0.0f64;
    for (name, check) in primitive_checks() {
        for seed in 0..50u64 {
            let rel = check(seed).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            worst_primitive = worst_primitive.max(rel);
            assert!(rel < PRIMITIVE_TOL, "{name} seed {seed}: rel err {rel:.3e}");
        }
    }
    let mut worst_model = 0.0f64;
    for seed in [11u64, 29] {
        let out = model_fd_spot_check(seed, 2).unwrap();
        worst_model = worst_model.max(out.max_rel_err);
        assert!(out.max_rel_err < MODEL_TOL, "seed {seed}: rel err {:.3e}", out.max_rel_err);
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 600.0, "took {secs:.1}s, budget 600s");
    println!(
        "criterion 3: PASS — primitives max rel err {worst_primitive:.3e} (tol 1e-3, 50 seeds), \
         end-to-end max rel err {worst_model:.3e} (tol 1e-2) in {secs:.1}s"
    );
}

#[test]
fn criterion_4_attention_oracles() {
    let mut worst_factor = 0.0f64;
    let mut worst_conv = 0.0f64;
    let mut worst_cross = 0.0f64;
    for seed in 0..110u64 {
        // factor_attn
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = *[2usize, 4, 8].choose(&mut rng).unwrap();
        let heads = *[1usize, 2].choose(&mut rng).unwrap();
        let l = rng.gen_range(1..=8);
        let tokens = rand_mat(&mut rng, l, c);
        let (wq, wk, wv) = (rand_mat(&mut rng, c, c), rand_mat(&mut rng, c, c), rand_mat(&mut rng, c, c));
        let want = naive_factor_attn(&tokens, &wq, &wk, &wv, heads);
        let x = TokenSeq::new(tensor_of(&tokens), (1, l), false).unwrap();
        let mut w = AttnWeights {
            wq: tensor_of(&wq),
            wk: tensor_of(&wk),
            wv: tensor_of(&wv),
            pos: None,
            heads,
        };
        let got = factor_attn(&x, &w).unwrap();
        worst_factor = worst_factor.max(max_abs_diff(&got.data(), &mat_to_flat(&want)));

        // conv_attn on a grid, same weights plus positional kernels
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let c = *[2usize, 4].choose(&mut rng).unwrap();
        let heads = if c == 4 { *[1usize, 2].choose(&mut rng).unwrap() } else { 1 };
        let h = rng.gen_range(2..=4);
        let wd = rng.gen_range(2..=4);
        let has_cls = rng.gen_bool(0.5);
        let l = h * wd + usize::from(has_cls);
        let tokens = rand_mat(&mut rng, l, c);
        let (wq, wk, wv) = (rand_mat(&mut rng, c, c), rand_mat(&mut rng, c, c), rand_mat(&mut rng, c, c));
        let pos = rand_img(&mut rng, c, 3, 3);
        let want = naive_conv_attn(&tokens, (h, wd), has_cls, &wq, &wk, &wv, &pos, heads);
        let x = TokenSeq::new(tensor_of(&tokens), (h, wd), has_cls).unwrap();
        let mut wca = AttnWeights {
            wq: tensor_of(&wq),
            wk: tensor_of(&wk),
            wv: tensor_of(&wv),
            pos: Some(tensor_of_img(&pos)),
            heads,
        };
        let got = conv_attn(&x, &wca).unwrap();
        worst_conv = worst_conv.max(max_abs_diff(&got.data(), &mat_to_flat(&want)));

        // with zero positional kernels conv_attn must equal factor_attn bit for bit
        wca.pos = Some(Tensor::from_vec(&[c, 3, 3], vec![0.0; c * 9]).unwrap());
        let plain = conv_attn(&x, &wca).unwrap();
        wca.pos = None;
        let fa = factor_attn(&x, &wca).unwrap();
        assert_eq!(plain.data(), fa.data(), "seed {seed}: P=0 conv_attn != factor_attn");

        // cross_attn with row-stochastic check
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
        let c = *[2usize, 4, 8].choose(&mut rng).unwrap();
        let heads = *[1usize, 2].choose(&mut rng).unwrap();
        let h = rng.gen_range(1..=3);
        let wd = rng.gen_range(1..=3);
        let goal = rand_img(&mut rng, c, h, wd);
        let cur = rand_img(&mut rng, c, h, wd);
        let (wq, wk, wv) = (rand_mat(&mut rng, c, c), rand_mat(&mut rng, c, c), rand_mat(&mut rng, c, c));
        let (want, attns) = naive_cross_attn(&goal, &cur, &wq, &wk, &wv, heads);
        for a in &attns {
            for row in a {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "seed {seed}: attention row sums to {s}");
            }
        }
        w = AttnWeights {
            wq: tensor_of(&wq),
            wk: tensor_of(&wk),
            wv: tensor_of(&wv),
            pos: None,
            heads,
        };
        let got = cross_attn(&tensor_of_img(&goal), &tensor_of_img(&cur), &w).unwrap();
        worst_cross = worst_cross.max(max_abs_diff(&got.data(), &flat3(&want)));
    }
    assert!(worst_factor < 1e-5);
    assert!(worst_conv < 1e-5);
    assert!(worst_cross < 1e-5);
    println!(
        "criterion 4: PASS — 110 instances each: factor {worst_factor:.3e}, \
         conv {worst_conv:.3e}, cross {worst_cross:.3e} abs err (tol 1e-5); \
         rows sum to 1±1e-6; P=0 conv equals factor exactly"
    );
}

#[test]
fn criterion_5_correlation_oracle() {
    let mut instances = 0;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_max = rng.gen_range(1..=3usize);
        let c = rng.gen_range(1..=3usize);
        let h = rng.gen_range(1..=5usize);
        let w = rng.gen_range(1..=5usize);
        let z = rand_img(&mut rng, 2 * c, h, w);
        let want = naive_correlate(&z, d_max as isize);
        let got = correlate(&tensor_of_img(&z), d_max).unwrap();
        assert_eq!(
            got.data(),
            flat3(&want),
            "seed {seed}: correlate differs from brute force (c={c}, D={d_max})"
        );
        instances += 1;
    }
    println!(
        "criterion 5: PASS — correlate equals the brute-force triple loop bit-for-bit \
         on {instances} instances, D in {{1,2,3}}"
    );
}

#[test]
fn criterion_6_loss_and_metric_oracles() {
    // soft dice bounds on random probability fields
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(2..=5usize), rng.gen_range(2..=5usize));
        let y: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..=1u8)).collect();
        let mut p1: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.001..0.999)).collect();
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend(p1.iter().map(|v| 1.0 - v));
        data.append(&mut p1);
        let p = Tensor::from_vec(&[2, h, w], data).unwrap();
        let d = soft_dice(&p, &onehot(&y, h, w).unwrap(), DICE_EPSILON).unwrap().item();
        assert!((0.0..=1.0).contains(&d), "soft dice {d} out of range");
    }
    // perfect one-hot and total miss
    let y = vec![0u8, 1, 1, 0];
    let perfect = onehot::<f64>(&y, 2, 2).unwrap();
    let d0 = soft_dice(&perfect, &perfect, DICE_EPSILON).unwrap().item();
    assert!(d0 < 1e-6 && d0 >= 0.0, "perfect dice {d0}");
    let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
    let d1 = soft_dice(&onehot::<f64>(&flipped, 2, 2).unwrap(), &perfect, DICE_EPSILON)
        .unwrap()
        .item();
    assert!((d1 - 1.0).abs() < 1e-12, "total-miss dice {d1}");

    // metrics equal a naive counting oracle exactly
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.gen_range(1..=64usize);
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1u8)).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1u8)).collect();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(&y) {
            match (p, t) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        let c = confusion(&pred, &y).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        let p_naive = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r_naive = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f_naive = if tp == 0 { 0.0 } else { 2.0 / (1.0 / p_naive + 1.0 / r_naive) };
        let i_naive = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        assert_eq!(precision(&c), p_naive);
        assert_eq!(recall(&c), r_naive);
        assert_eq!(f1(&c), f_naive);
        assert_eq!(iou(&c), i_naive);
    }

    // the worked example, exact
    let pred = [1u8, 1, 1, 1, 1, 0, 0, 0];
    let y = [1u8, 1, 1, 0, 0, 1, 0, 0];
    let c = confusion(&pred, &y).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_), (3, 2, 1));
    assert_eq!(precision(&c), 0.6);
    assert_eq!(recall(&c), 0.75);
    assert_eq!(f1(&c), 2.0 / (1.0 / 0.6 + 1.0 / 0.75));
    assert!((f1(&c) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou(&c), 0.5);

    println!(
        "criterion 6: PASS — soft dice in [0,1], ~0 at perfect, 1 at total miss \
         (gradient coverage under criterion 3); metrics equal the counting oracle \
         exactly on 100 instances; worked example 0.6/0.75/0.667/0.5 reproduces"
    );
}

const DESK_DATA_SEED: u64 = 20_260_822;

#[test]
fn criterion_7_training_dynamics_desk_scale() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SplitSpec::desk(DESK_DATA_SEED);
    build_dataset(&spec, 64, dir.path(), worker_count()).unwrap();
    let train_set = load_split(dir.path(), "train").unwrap();
    let val_set = load_split(dir.path(), "val").unwrap();
    let test_set = load_split(dir.path(), "test").unwrap();
    assert_eq!((train_set.len(), val_set.len(), test_set.len()), (500, 100, 100));

    let mut cfg = TrainConfig::desk(7);
    cfg.max_epochs = 30;
    let mut sink = std::io::sink();
    let out = train::<f32>(&cfg, &train_set, &val_set, &mut sink).unwrap();
    let first = out.logs.first().unwrap().train_loss;
    let last = out.logs.last().unwrap().train_loss;
    assert!(
        last < 0.5 * first,
        "(a) final train loss {last:.4} not below half of initial {first:.4}"
    );

    let weights = LossWeights::default();
    let (_, model_report) =
        evaluate_checkpoint(&out.best, &test_set, &weights, worker_count()).unwrap();

    let pairs: Vec<_> = val_set.iter().map(|s| (s.goal.clone(), s.cur.clone(), s.mask.clone())).collect();
    let (theta, _) = tune_theta(&pairs).unwrap();
    let mut accum = EvalAccum::default();
    for s in &test_set {
        let pred = pixel_difference_baseline(&s.goal, &s.cur, theta).unwrap();
        accum.add_sample(&pred, &s.mask).unwrap();
    }
    let base_report = accum.finish();
    assert!(
        model_report.miou > base_report.miou,
        "(b) model mIoU {:.4} not above baseline {:.4}",
        model_report.miou,
        base_report.miou
    );
    assert!(
        model_report.f1 > base_report.f1,
        "(b) model F1 {:.4} not above baseline {:.4}",
        model_report.f1,
        base_report.f1
    );

    // (c) scripted early-stopping sequence returns the argmin epoch
    let script = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95];
    let mut stopper = EarlyStopping::new(5);
    let mut stopped_at = 0u64;
    for (i, &l) in script.iter().enumerate() {
        stopper.observe(i as u64 + 1, l);
        if stopper.should_stop() {
            stopped_at = i as u64 + 1;
            break;
        }
    }
    assert_eq!((stopper.best_epoch, stopped_at), (2, 7), "(c) scripted early stop");

    let mins = t0.elapsed().as_secs_f64() / 60.0;
    assert!(mins < 30.0, "took {mins:.1} min, budget 30 min");
    println!(
        "criterion 7: PASS — (a) train loss {first:.4} -> {last:.4} over {} epochs; \
         (b) model mIoU {:.4} / F1 {:.4} vs baseline {:.4} / {:.4} at theta={theta}; \
         (c) scripted argmin epoch 2, stop after 7; total {mins:.1} min",
        out.logs.len(),
        model_report.miou,
        model_report.f1,
        base_report.miou,
        base_report.f1
    );
}

#[test]
fn criterion_8_ablation_ordering_soft_check() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SplitSpec { train: 200, val: 50, test: 50, base_seed: DESK_DATA_SEED ^ 0xab1a };
    build_dataset(&spec, 64, dir.path(), worker_count()).unwrap();
    let train_set = load_split(dir.path(), "train").unwrap();
    let val_set = load_split(dir.path(), "val").unwrap();
    let test_set = load_split(dir.path(), "test").unwrap();

    let weights = LossWeights::default();
    let mut means = Vec::new();
    for ablation in [Ablation::Full, Ablation::NoCrossAttention] {
        let mut mious = Vec::new();
        for seed in [1u64, 2, 3] {
            let mut cfg = TrainConfig::desk(seed);
            cfg.model.ablation = ablation;
            cfg.max_epochs = 8;
            let mut sink = std::io::sink();
            let out = train::<f32>(&cfg, &train_set, &val_set, &mut sink).unwrap();
            let (_, report) =
                evaluate_checkpoint(&out.best, &test_set, &weights, worker_count()).unwrap();
            mious.push(report.miou);
        }
        let mean = mious.iter().sum::<f64>() / mious.len() as f64;
        println!("  ablation {}: per-seed mIoU {mious:?}, mean {mean:.4}", ablation.label());
        means.push(mean);
    }
    let (full, no_cross) = (means[0], means[1]);
    if full >= no_cross {
        println!(
            "criterion 8: PASS — mean test mIoU over 3 seeds: full (iv) {full:.4} >= \
             no-cross-attention (ii) {no_cross:.4}"
        );
    } else {
        // soft check: report and flag, never hard-fail; small-scale variance
        // can dominate this ordering
        println!(
            "criterion 8: FLAG — mean test mIoU over 3 seeds: full (iv) {full:.4} < \
             no-cross-attention (ii) {no_cross:.4}; flagged for investigation"
        );
    }
}

#[test]
fn criterion_9_determinism_and_persistence() {
    // dataset generation, single-threaded, twice
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let spec = SplitSpec { train: 8, val: 2, test: 2, base_seed: 99 };
    build_dataset(&spec, 64, d1.path(), 1).unwrap();
    build_dataset(&spec, 64, d2.path(), 1).unwrap();
    let mut files_compared = 0;
    for split in ["train", "val", "test"] {
        for entry in std::fs::read_dir(d1.path().join(split)).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.path().join(split).join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(split).join(&name)).unwrap();
            assert_eq!(a, b, "{split}/{name:?} differs between runs");
            files_compared += 1;
        }
    }
    assert_eq!(files_compared, 48, "4 files per sample, 12 samples");

    // training twice with one seed produces identical checkpoints
    let train_set = load_split(d1.path(), "train").unwrap();
    let val_set = load_split(d1.path(), "val").unwrap();
    let mut cfg = TrainConfig::desk(11);
    cfg.max_epochs = 2;
    cfg.batch_size = 4;
    let mut sink = std::io::sink();
    let run1 = train::<f32>(&cfg, &train_set, &val_set, &mut sink).unwrap();
    let run2 = train::<f32>(&cfg, &train_set, &val_set, &mut sink).unwrap();
    let c1 = d1.path().join("run1.ckpt");
    let c2 = d1.path().join("run2.ckpt");
    save_checkpoint(&c1, &run1.best).unwrap();
    save_checkpoint(&c2, &run2.best).unwrap();
    let bytes1 = std::fs::read(&c1).unwrap();
    assert_eq!(bytes1, std::fs::read(&c2).unwrap(), "same-seed training diverged");

    // checkpoint save -> load -> save round-trips bit-exactly
    let loaded = load_checkpoint(&c1).unwrap();
    let c3 = d1.path().join("run1-reload.ckpt");
    save_checkpoint(&c3, &loaded).unwrap();
    assert_eq!(bytes1, std::fs::read(&c3).unwrap(), "checkpoint round trip not bit-exact");

    println!(
        "criterion 9: PASS — {files_compared} generated files byte-identical across runs; \
         same-seed training checkpoints byte-identical; save/load/save bit-exact"
    );
}

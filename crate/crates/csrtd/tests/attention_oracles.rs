//! Attention ops vs naive direct-formula oracles on random instances.

mod common;

use common::*;
use csrtd::attention::{conv_attn, cross_attn, factor_attn, AttnWeights, TokenSeq};
use csrtd::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor_of(m: &Mat) -> Tensor<f64> {
    Tensor::from_vec(&[m.len(), m[0].len()], mat_to_flat(m)).unwrap()
}

fn tensor_of_img(img: &[Vec<Vec<f64>>]) -> Tensor<f64> {
    Tensor::from_vec(&[img.len(), img[0].len(), img[0][0].len()], flat3(img)).unwrap()
}

fn rand_img(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<Vec<Vec<f64>>> {
    (0..c)
        .map(|_| {
            (0..h)
                .map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn factor_attn_matches_naive_oracle() {
    let mut worst = 0.0f64;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = *[2usize, 4, 8].choose(&mut rng).unwrap();
        let heads = *[1usize, 2].choose(&mut rng).unwrap();
        let l = rng.gen_range(1..=8);
        let tokens = rand_mat(&mut rng, l, c);
        let wq = rand_mat(&mut rng, c, c);
        let wk = rand_mat(&mut rng, c, c);
        let wv = rand_mat(&mut rng, c, c);
        let want = naive_factor_attn(&tokens, &wq, &wk, &wv, heads);
        let x = TokenSeq::new(tensor_of(&tokens), (1, l), false).unwrap();
        let w = AttnWeights {
            wq: tensor_of(&wq),
            wk: tensor_of(&wk),
            wv: tensor_of(&wv),
            pos: None,
            heads,
        };
        let got = factor_attn(&x, &w).unwrap();
        worst = worst.max(max_abs_diff(&got.data(), &mat_to_flat(&want)));
    }
    println!("factor_attn vs naive: max abs diff {worst:.3e} over 120 instances");
    assert!(worst < 1e-5);
}

#[test]
fn conv_attn_matches_naive_oracle_and_zeroes_cls_alpha() {
    let mut worst = 0.0f64;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let c = *[2usize, 4].choose(&mut rng).unwrap();
        let heads = if c == 4 { *[1usize, 2].choose(&mut rng).unwrap() } else { 1 };
        let h = rng.gen_range(2..=4);
        let wd = rng.gen_range(2..=4);
        let has_cls = rng.gen_bool(0.5);
        let l = h * wd + usize::from(has_cls);
        let tokens = rand_mat(&mut rng, l, c);
        let wq = rand_mat(&mut rng, c, c);
        let wk = rand_mat(&mut rng, c, c);
        let wv = rand_mat(&mut rng, c, c);
        let pos: Vec<Vec<Vec<f64>>> = rand_img(&mut rng, c, 3, 3);
        let want = naive_conv_attn(&tokens, (h, wd), has_cls, &wq, &wk, &wv, &pos, heads);
        let x = TokenSeq::new(tensor_of(&tokens), (h, wd), has_cls).unwrap();
        let w = AttnWeights {
            wq: tensor_of(&wq),
            wk: tensor_of(&wk),
            wv: tensor_of(&wv),
            pos: Some(tensor_of_img(&pos)),
            heads,
        };
        let got = conv_attn(&x, &w).unwrap();
        worst = worst.max(max_abs_diff(&got.data(), &mat_to_flat(&want)));
        if has_cls {
            // the positional term must leave the CLS row exactly at its
            // factor-attention value
            let fa = factor_attn(&x, &w).unwrap();
            for ch in 0..c {
                assert_eq!(got.data()[ch], fa.data()[ch], "cls alpha not zero (seed {seed})");
            }
        }
    }
    println!("conv_attn vs naive: max abs diff {worst:.3e} over 120 instances");
    assert!(worst < 1e-5);
}

#[test]
fn cross_attn_matches_naive_oracle_and_rows_sum_to_one() {
    let mut worst = 0.0f64;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let c = *[2usize, 4, 8].choose(&mut rng).unwrap();
        let heads = *[1usize, 2].choose(&mut rng).unwrap();
        let h = rng.gen_range(1..=3);
        let wd = rng.gen_range(1..=3);
        let goal = rand_img(&mut rng, c, h, wd);
        let cur = rand_img(&mut rng, c, h, wd);
        let wq = rand_mat(&mut rng, c, c);
        let wk = rand_mat(&mut rng, c, c);
        let wv = rand_mat(&mut rng, c, c);
        let (want, attns) = naive_cross_attn(&goal, &cur, &wq, &wk, &wv, heads);
        for a in &attns {
            for row in a {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "attention row sums to {s}");
            }
        }
        let w = AttnWeights {
            wq: tensor_of(&wq),
            wk: tensor_of(&wk),
            wv: tensor_of(&wv),
            pos: None,
            heads,
        };
        let got = cross_attn(&tensor_of_img(&goal), &tensor_of_img(&cur), &w).unwrap();
        worst = worst.max(max_abs_diff(&got.data(), &flat3(&want)));
    }
    println!("cross_attn vs naive: max abs diff {worst:.3e} over 120 instances");
    assert!(worst < 1e-5);
}

#[test]
fn cross_attn_is_equivariant_to_cur_token_permutation() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (c, h, wd) = (4usize, 3usize, 2usize);
        let cur = rand_img(&mut rng, c, h, wd);
        let goal = rand_img(&mut rng, c, h, wd);
        let w = AttnWeights::<f64>::new(c, 2, false, &mut rng).unwrap();

        let mut perm: Vec<usize> = (0..h * wd).collect();
        perm.shuffle(&mut rng);
        let mut cur_p = cur.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                cur_p[ch][dst / wd][dst % wd] = cur[ch][src / wd][src % wd];
            }
        }
        let a = cross_attn(&tensor_of_img(&goal), &tensor_of_img(&cur), &w).unwrap();
        let b = cross_attn(&tensor_of_img(&goal), &tensor_of_img(&cur_p), &w).unwrap();
        let diff = max_abs_diff(&a.data(), &b.data());
        assert!(diff < 1e-9, "permuting keys/values changed output by {diff}");
    }
}

#[test]
fn cross_attn_block_diagonal_weights_split_into_independent_heads() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (c, heads, h, wd) = (4usize, 2usize, 2usize, 3usize);
        let d = c / heads;
        let goal = rand_img(&mut rng, c, h, wd);
        let cur = rand_img(&mut rng, c, h, wd);
        // block-diagonal C×C weights from per-head d×d blocks
        let blocks: Vec<[Mat; 3]> = (0..heads)
            .map(|_| {
                [
                    rand_mat(&mut rng, d, d),
                    rand_mat(&mut rng, d, d),
                    rand_mat(&mut rng, d, d),
                ]
            })
            .collect();
        let mut wq = vec![vec![0.0; c]; c];
        let mut wk = vec![vec![0.0; c]; c];
        let mut wv = vec![vec![0.0; c]; c];
        for j in 0..heads {
            for a in 0..d {
                for b in 0..d {
                    wq[j * d + a][j * d + b] = blocks[j][0][a][b];
                    wk[j * d + a][j * d + b] = blocks[j][1][a][b];
                    wv[j * d + a][j * d + b] = blocks[j][2][a][b];
                }
            }
        }
        let w = AttnWeights {
            wq: tensor_of(&wq),
            wk: tensor_of(&wk),
            wv: tensor_of(&wv),
            pos: None,
            heads,
        };
        let joint = cross_attn(&tensor_of_img(&goal), &tensor_of_img(&cur), &w).unwrap();

        let mut independent = Vec::new();
        for j in 0..heads {
            let gslice: Vec<Vec<Vec<f64>>> = goal[j * d..(j + 1) * d].to_vec();
            let cslice: Vec<Vec<Vec<f64>>> = cur[j * d..(j + 1) * d].to_vec();
            let wj = AttnWeights {
                wq: tensor_of(&blocks[j][0]),
                wk: tensor_of(&blocks[j][1]),
                wv: tensor_of(&blocks[j][2]),
                pos: None,
                heads: 1,
            };
            let out = cross_attn(&tensor_of_img(&gslice), &tensor_of_img(&cslice), &wj).unwrap();
            independent.extend(out.data().to_vec());
        }
        let diff = max_abs_diff(&joint.data(), &independent);
        assert!(diff < 1e-9, "head mixing detected, diff {diff}");
    }
}

//! Naive reference implementations shared by the oracle test suites.
//! Everything here is written directly from the formulas with dense loops,
//! independent of the tensor library.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for t in 0..k {
            for j in 0..n {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// FactorAttn per head j: (Q_j/sqrt(d)) · (softmax_tokens(K_j)ᵀ · V_j).
pub fn naive_factor_attn(tokens: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, heads: usize) -> Mat {
    let l = tokens.len();
    let c = wq.len();
    let d = c / heads;
    let q = mat_mul(tokens, wq);
    let k = mat_mul(tokens, wk);
    let v = mat_mul(tokens, wv);
    let mut out = vec![vec![0.0; c]; l];
    for j in 0..heads {
        let base = j * d;
        // softmax over the token axis, one lane per channel column
        let mut a = vec![vec![0.0; d]; l];
        for col in 0..d {
            let mut lane: Vec<f64> = (0..l).map(|r| k[r][base + col]).collect();
            softmax_inplace(&mut lane);
            for r in 0..l {
                a[r][col] = lane[r];
            }
        }
        let mut kv = vec![vec![0.0; d]; d];
        for di in 0..d {
            for dj in 0..d {
                for r in 0..l {
                    kv[di][dj] += a[r][di] * v[r][base + dj];
                }
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        for r in 0..l {
            for dj in 0..d {
                let mut acc = 0.0;
                for di in 0..d {
                    acc += q[r][base + di] * kv[di][dj];
                }
                out[r][base + dj] = acc * scale;
            }
        }
    }
    out
}

/// Depthwise 3x3 conv, pad 1, on [C][H][W].
pub fn naive_depthwise3(img: &[Vec<Vec<f64>>], kernel: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = (img.len(), img[0].len(), img[0][0].len());
    let mut out = vec![vec![vec![0.0; w]; h]; c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        let ix = x as isize + kx as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        acc += img[ch][iy as usize][ix as usize] * kernel[ch][ky][kx];
                    }
                }
                out[ch][y][x] = acc;
            }
        }
    }
    out
}

/// ConvAttn = FactorAttn + α with α = (X·Wq) ∘ Depthwise(P, image(X·Wv)),
/// zero on the CLS row.
pub fn naive_conv_attn(
    tokens: &Mat,
    spatial: (usize, usize),
    has_cls: bool,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    pos: &[Vec<Vec<f64>>],
    heads: usize,
) -> Mat {
    let (h, w) = spatial;
    let c = wq.len();
    let off = usize::from(has_cls);
    let mut out = naive_factor_attn(tokens, wq, wk, wv, heads);
    let q = mat_mul(tokens, wq);
    let v = mat_mul(tokens, wv);
    let mut vimg = vec![vec![vec![0.0; w]; h]; c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                vimg[ch][y][x] = v[off + y * w + x][ch];
            }
        }
    }
    let dw = naive_depthwise3(&vimg, pos);
    for y in 0..h {
        for x in 0..w {
            let r = off + y * w + x;
            for ch in 0..c {
                out[r][ch] += q[r][ch] * dw[ch][y][x];
            }
        }
    }
    out
}

/// Full-score-matrix cross-attention on [C][H][W] lanes; returns the output
/// image and every head's attention matrix (rows = goal tokens).
pub fn naive_cross_attn(
    goal: &[Vec<Vec<f64>>],
    cur: &[Vec<Vec<f64>>],
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    heads: usize,
) -> (Vec<Vec<Vec<f64>>>, Vec<Mat>) {
    let (c, h, w) = (goal.len(), goal[0].len(), goal[0][0].len());
    let l = h * w;
    let d = c / heads;
    let to_tokens = |img: &[Vec<Vec<f64>>]| -> Mat {
        let mut t = vec![vec![0.0; c]; l];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    t[y * w + x][ch] = img[ch][y][x];
                }
            }
        }
        t
    };
    let tg = to_tokens(goal);
    let tc = to_tokens(cur);
    let q = mat_mul(&tg, wq);
    let k = mat_mul(&tc, wk);
    let v = mat_mul(&tc, wv);
    let mut out_tokens = vec![vec![0.0; c]; l];
    let mut attns = Vec::with_capacity(heads);
    for j in 0..heads {
        let base = j * d;
        let scale = 1.0 / (d as f64).sqrt();
        let mut a = vec![vec![0.0; l]; l];
        for r in 0..l {
            for m in 0..l {
                let mut s = 0.0;
                for di in 0..d {
                    s += q[r][base + di] * k[m][base + di];
                }
                a[r][m] = s * scale;
            }
            softmax_inplace(&mut a[r]);
        }
        for r in 0..l {
            for dj in 0..d {
                let mut acc = 0.0;
                for m in 0..l {
                    acc += a[r][m] * v[m][base + dj];
                }
                out_tokens[r][base + dj] = acc;
            }
        }
        attns.push(a);
    }
    let mut out = vec![vec![vec![0.0; w]; h]; c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[ch][y][x] = out_tokens[y * w + x][ch];
            }
        }
    }
    (out, attns)
}

/// Brute-force displacement correlation on [2c][H][W].
pub fn naive_correlate(z: &[Vec<Vec<f64>>], d_max: isize) -> Vec<Vec<Vec<f64>>> {
    let c2 = z.len();
    let c = c2 / 2;
    let (h, w) = (z[0].len(), z[0][0].len());
    let side = (2 * d_max + 1) as usize;
    let mut out = vec![vec![vec![0.0; w]; h]; side * side];
    let mut di = 0;
    for dy in -d_max..=d_max {
        for dx in -d_max..=d_max {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += z[ch][y as usize][x as usize] * z[c + ch][sy as usize][sx as usize];
                    }
                    out[di][y as usize][x as usize] = acc / c as f64;
                }
            }
            di += 1;
        }
    }
    out
}

pub fn flat3(v: &[Vec<Vec<f64>>]) -> Vec<f64> {
    v.iter().flatten().flatten().cloned().collect()
}

pub fn mat_to_flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().cloned().collect()
}

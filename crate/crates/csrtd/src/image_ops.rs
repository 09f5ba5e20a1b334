//! Differentiable ops on [C, H, W] image tensors: convolutions, pooling,
//! bilinear resize, and the displacement-correlation layer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rank3<E: Scalar>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::BadShape {
            op,
            shape: x.shape().to_vec(),
            why: "rank 3 [C,H,W] required".into(),
        }),
    }
}

/// Cross-correlation conv. kernel: [C_out, C_in, k, k], zero padding, no bias.
pub fn conv2d<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let (cin, h, w) = rank3("conv2d", x)?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != cin || ks[2] != ks[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let (cout, k) = (ks[0], ks[2]);
    if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            why: format!("k={k} s={stride} p={padding} gives non-positive output"),
        });
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![E::zero(); cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = E::zero();
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        if iy < padding || iy >= h + padding {
                            continue;
                        }
                        let iy = iy - padding;
                        for kx in 0..k {
                            let ix = ox * stride + kx;
                            if ix < padding || ix >= w + padding {
                                continue;
                            }
                            let ix = ix - padding;
                            acc = acc
                                + xd[(ci * h + iy) * w + ix]
                                    * kd[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![cout, ho, wo],
        out,
        vec![x.clone(), kernel.clone()],
        Box::new(move |_, g, parents| {
            let (x, kernel) = (&parents[0], &parents[1]);
            let xd = x.data();
            let kd = kernel.data();
            x.accum_grad(|gx| {
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(co * ho + oy) * wo + ox];
                            for ci in 0..cin {
                                for ky in 0..k {
                                    let iy = oy * stride + ky;
                                    if iy < padding || iy >= h + padding {
                                        continue;
                                    }
                                    let iy = iy - padding;
                                    for kx in 0..k {
                                        let ix = ox * stride + kx;
                                        if ix < padding || ix >= w + padding {
                                            continue;
                                        }
                                        let ix = ix - padding;
                                        gx[(ci * h + iy) * w + ix] = gx[(ci * h + iy) * w + ix]
                                            + gv * kd[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            kernel.accum_grad(|gk| {
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(co * ho + oy) * wo + ox];
                            for ci in 0..cin {
                                for ky in 0..k {
                                    let iy = oy * stride + ky;
                                    if iy < padding || iy >= h + padding {
                                        continue;
                                    }
                                    let iy = iy - padding;
                                    for kx in 0..k {
                                        let ix = ox * stride + kx;
                                        if ix < padding || ix >= w + padding {
                                            continue;
                                        }
                                        let ix = ix - padding;
                                        gk[((co * cin + ci) * k + ky) * k + kx] = gk
                                            [((co * cin + ci) * k + ky) * k + kx]
                                            + gv * xd[(ci * h + iy) * w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }),
    ))
}

/// Per-channel conv with kernel [C, k, k], odd k, padding (k-1)/2, stride 1.
pub fn depthwise_conv2d<E: Scalar>(x: &Tensor<E>, kernel: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = rank3("depthwise_conv2d", x)?;
    let ks = kernel.shape();
    if ks.len() != 3 || ks[0] != c || ks[1] != ks[2] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: x.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let k = ks[1];
    if k % 2 == 0 {
        return Err(Error::BadShape {
            op: "depthwise_conv2d",
            shape: ks.to_vec(),
            why: "kernel size must be odd".into(),
        });
    }
    let pad = (k - 1) / 2;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![E::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = E::zero();
                for ky in 0..k {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..k {
                        let ix = ox + kx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        let ix = ix - pad;
                        acc = acc + xd[(ch * h + iy) * w + ix] * kd[(ch * k + ky) * k + kx];
                    }
                }
                out[(ch * h + oy) * w + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, h, w],
        out,
        vec![x.clone(), kernel.clone()],
        Box::new(move |_, g, parents| {
            let (x, kernel) = (&parents[0], &parents[1]);
            let xd = x.data();
            let kd = kernel.data();
            x.accum_grad(|gx| {
                for ch in 0..c {
                    for oy in 0..h {
                        for ox in 0..w {
                            let gv = g[(ch * h + oy) * w + ox];
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < pad || iy >= h + pad {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < pad || ix >= w + pad {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    gx[(ch * h + iy) * w + ix] = gx[(ch * h + iy) * w + ix]
                                        + gv * kd[(ch * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            });
            kernel.accum_grad(|gk| {
                for ch in 0..c {
                    for oy in 0..h {
                        for ox in 0..w {
                            let gv = g[(ch * h + oy) * w + ox];
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < pad || iy >= h + pad {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < pad || ix >= w + pad {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    gk[(ch * k + ky) * k + kx] = gk[(ch * k + ky) * k + kx]
                                        + gv * xd[(ch * h + iy) * w + ix];
                                }
                            }
                        }
                    }
                }
            });
        }),
    ))
}

/// 2x2 average pooling, stride 2. Requires even H and W.
pub fn avgpool2x<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = rank3("avgpool2x", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::BadShape {
            op: "avgpool2x",
            shape: x.shape().to_vec(),
            why: "even spatial size required".into(),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let q = E::c(0.25);
    let xd = x.data();
    let mut out = vec![E::zero(); c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                out[(ch * ho + oy) * wo + ox] =
                    (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * q;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, ho, wo],
        out,
        vec![x.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accum_grad(|gx| {
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(ch * ho + oy) * wo + ox] * q;
                            let base = (ch * h + 2 * oy) * w + 2 * ox;
                            gx[base] = gx[base] + gv;
                            gx[base + 1] = gx[base + 1] + gv;
                            gx[base + w] = gx[base + w] + gv;
                            gx[base + w + 1] = gx[base + w + 1] + gv;
                        }
                    }
                }
            });
        }),
    ))
}

/// Source taps for one output row/col of the x2 bilinear resize: indices
/// (i0, i1) and the weight on i1, with corners unaligned and edges clamped.
fn bilinear_taps(n_in: usize, o: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / 2.0 - 0.5;
    if s <= 0.0 {
        (0, 0, 0.0)
    } else if s >= (n_in - 1) as f64 {
        (n_in - 1, n_in - 1, 0.0)
    } else {
        let i0 = s.floor() as usize;
        (i0, i0 + 1, s - i0 as f64)
    }
}

/// Bilinear 2x upsample, corner alignment off.
pub fn upsample2x<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = rank3("upsample2x", x)?;
    let (ho, wo) = (2 * h, 2 * w);
    let ytaps: Vec<(usize, usize, f64)> = (0..ho).map(|o| bilinear_taps(h, o)).collect();
    let xtaps: Vec<(usize, usize, f64)> = (0..wo).map(|o| bilinear_taps(w, o)).collect();
    let xd = x.data();
    let mut out = vec![E::zero(); c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            let (y0, y1, wy) = ytaps[oy];
            let wy = E::c(wy);
            for ox in 0..wo {
                let (x0, x1, wx) = xtaps[ox];
                let wx = E::c(wx);
                let p00 = xd[(ch * h + y0) * w + x0];
                let p01 = xd[(ch * h + y0) * w + x1];
                let p10 = xd[(ch * h + y1) * w + x0];
                let p11 = xd[(ch * h + y1) * w + x1];
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                out[(ch * ho + oy) * wo + ox] = top + (bot - top) * wy;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, ho, wo],
        out,
        vec![x.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accum_grad(|gx| {
                for ch in 0..c {
                    for oy in 0..ho {
                        let (y0, y1, wy) = ytaps[oy];
                        let wy = E::c(wy);
                        for ox in 0..wo {
                            let (x0, x1, wx) = xtaps[ox];
                            let wx = E::c(wx);
                            let gv = g[(ch * ho + oy) * wo + ox];
                            let one = E::one();
                            gx[(ch * h + y0) * w + x0] =
                                gx[(ch * h + y0) * w + x0] + gv * (one - wy) * (one - wx);
                            gx[(ch * h + y0) * w + x1] =
                                gx[(ch * h + y0) * w + x1] + gv * (one - wy) * wx;
                            gx[(ch * h + y1) * w + x0] =
                                gx[(ch * h + y1) * w + x0] + gv * wy * (one - wx);
                            gx[(ch * h + y1) * w + x1] = gx[(ch * h + y1) * w + x1] + gv * wy * wx;
                        }
                    }
                }
            });
        }),
    ))
}

/// Displacement correlation between the two channel halves of z.
/// Output channel (dy+D)*(2D+1)+(dx+D) holds (1/c)*sum_ch A(ch,p)*B(ch,p+d),
/// zero-padded outside the image.
pub fn correlate<E: Scalar>(z: &Tensor<E>, d_max: usize) -> Result<Tensor<E>> {
    let (c2, h, w) = rank3("correlate", z)?;
    if c2 % 2 != 0 || c2 == 0 {
        return Err(Error::BadShape {
            op: "correlate",
            shape: z.shape().to_vec(),
            why: "even channel count required".into(),
        });
    }
    if d_max == 0 {
        return Err(Error::BadShape {
            op: "correlate",
            shape: z.shape().to_vec(),
            why: "max displacement must be >= 1".into(),
        });
    }
    let c = c2 / 2;
    let side = 2 * d_max + 1;
    let dd = d_max as isize;
    // divide rather than multiply by a reciprocal so results are bit-equal
    // to a plain sum-then-divide reference
    let lanes = E::c(c as f64);
    let norm = E::one() / lanes;
    let zd = z.data();
    let mut out = vec![E::zero(); side * side * h * w];
    for (di, (dy, dx)) in displacements(dd).enumerate() {
        for y in 0..h as isize {
            let sy = y + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let sx = x + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let mut acc = E::zero();
                for ch in 0..c {
                    let a = zd[(ch * h + y as usize) * w + x as usize];
                    let b = zd[((c + ch) * h + sy as usize) * w + sx as usize];
                    acc = acc + a * b;
                }
                out[(di * h + y as usize) * w + x as usize] = acc / lanes;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![side * side, h, w],
        out,
        vec![z.clone()],
        Box::new(move |_, g, parents| {
            let zd = parents[0].data();
            parents[0].accum_grad(|gz| {
                for (di, (dy, dx)) in displacements(dd).enumerate() {
                    for y in 0..h as isize {
                        let sy = y + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w as isize {
                            let sx = x + dx;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let gv = g[(di * h + y as usize) * w + x as usize] * norm;
                            for ch in 0..c {
                                let ai = (ch * h + y as usize) * w + x as usize;
                                let bi = ((c + ch) * h + sy as usize) * w + sx as usize;
                                gz[ai] = gz[ai] + gv * zd[bi];
                                gz[bi] = gz[bi] + gv * zd[ai];
                            }
                        }
                    }
                }
            });
        }),
    ))
}

/// Row-major displacement order: dy outer, dx inner, each in [-d, d].
fn displacements(d: isize) -> impl Iterator<Item = (isize, isize)> {
    (-d..=d).flat_map(move |dy| (-d..=d).map(move |dx| (dy, dx)))
}

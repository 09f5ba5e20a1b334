//! Primitive differentiable ops on rank-1..3 tensors. Each forward computes
//! plain loops and records a closure that pushes the upstream gradient into
//! its parents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<E: Scalar>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, parents| {
            parents[0].accum_grad(|ga| {
                for (gi, &gv) in ga.iter_mut().zip(g) {
                    *gi = *gi + gv;
                }
            });
            parents[1].accum_grad(|gb| {
                for (gi, &gv) in gb.iter_mut().zip(g) {
                    *gi = *gi + gv;
                }
            });
        }),
    ))
}

pub fn sub<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, parents| {
            parents[0].accum_grad(|ga| {
                for (gi, &gv) in ga.iter_mut().zip(g) {
                    *gi = *gi + gv;
                }
            });
            parents[1].accum_grad(|gb| {
                for (gi, &gv) in gb.iter_mut().zip(g) {
                    *gi = *gi - gv;
                }
            });
        }),
    ))
}

pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let (ad, bd) = (a.data(), b.data());
            a.accum_grad(|ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * bd[i];
                }
            });
            b.accum_grad(|gb| {
                for i in 0..gb.len() {
                    gb[i] = gb[i] + g[i] * ad[i];
                }
            });
        }),
    ))
}

pub fn div<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("div", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|_, g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let (ad, bd) = (a.data(), b.data());
            a.accum_grad(|ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] / bd[i];
                }
            });
            b.accum_grad(|gb| {
                for i in 0..gb.len() {
                    gb[i] = gb[i] - g[i] * ad[i] / (bd[i] * bd[i]);
                }
            });
        }),
    ))
}

pub fn scale<E: Scalar>(a: &Tensor<E>, c: E) -> Tensor<E> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accum_grad(|ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * c;
                }
            });
        }),
    )
}

pub fn add_scalar<E: Scalar>(a: &Tensor<E>, c: E) -> Tensor<E> {
    let data = a.data().iter().map(|&x| x + c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|_, g, parents| {
            parents[0].accum_grad(|ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i];
                }
            });
        }),
    )
}

/// x: `[L, C]` plus a per-column bias b: `[C]`, broadcast over rows.
pub fn add_row<E: Scalar>(x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() != 2 || b.shape() != [x.shape()[1]] {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let bd = b.data();
    let mut data = vec![E::zero(); l * c];
    for r in 0..l {
        for j in 0..c {
            data[r * c + j] = xd[r * c + j] + bd[j];
        }
    }
    Ok(Tensor::from_op(
        vec![l, c],
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accum_grad(|gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[i];
                }
            });
            parents[1].accum_grad(|gb| {
                for r in 0..l {
                    for j in 0..c {
                        gb[j] = gb[j] + g[r * c + j];
                    }
                }
            });
        }),
    ))
}

pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |_, g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let (ad, bd) = (a.data(), b.data());
            // dA = dC · B^T
            a.accum_grad(|ga| {
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = E::zero();
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &bd[t * n..(t + 1) * n];
                        for j in 0..n {
                            acc = acc + grow[j] * brow[j];
                        }
                        ga[i * k + t] = ga[i * k + t] + acc;
                    }
                }
            });
            // dB = A^T · dC
            b.accum_grad(|gb| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for t in 0..k {
                        let av = ad[i * k + t];
                        let gbrow = &mut gb[t * n..(t + 1) * n];
                        for j in 0..n {
                            gbrow[j] = gbrow[j] + av * grow[j];
                        }
                    }
                }
            });
        }),
    ))
}

pub fn transpose2d<E: Scalar>(a: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 {
        return Err(Error::BadShape {
            op: "transpose2d",
            shape: a.shape().to_vec(),
            why: "rank 2 required".into(),
        });
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accum_grad(|ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                    }
                }
            });
        }),
    ))
}

pub fn reshape<E: Scalar>(a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::BadShape {
            op: "reshape",
            shape: shape.to_vec(),
            why: format!("element count {} != {}", shape.iter().product::<usize>(), a.numel()),
        });
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        a.data().to_vec(),
        vec![a.clone()],
        Box::new(|_, g, parents| {
            parents[0].accum_grad(|ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i];
                }
            });
        }),
    ))
}

pub fn concat<E: Scalar>(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::BadShape {
            op: "concat",
            shape: vec![],
            why: "no inputs".into(),
        });
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(Error::BadShape {
            op: "concat",
            shape: parts[0].shape().to_vec(),
            why: format!("axis {axis} out of range"),
        });
    }
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (d, (&sa, &sb)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if d != axis && sa != sb {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
    }
    let outer: usize = parts[0].shape()[..axis].iter().product();
    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
    let axis_dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total_axis: usize = axis_dims.iter().sum();
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = total_axis;

    let mut out = vec![E::zero(); outer * total_axis * inner];
    for o in 0..outer {
        let mut off = 0;
        for (p, &ad) in parts.iter().zip(&axis_dims) {
            let src = &p.data()[o * ad * inner..(o + 1) * ad * inner];
            let dst = &mut out[(o * total_axis + off) * inner..(o * total_axis + off + ad) * inner];
            dst.copy_from_slice(src);
            off += ad;
        }
    }
    Ok(Tensor::from_op(
        shape,
        out,
        parts.to_vec(),
        Box::new(move |_, g, parents| {
            for o in 0..outer {
                let mut off = 0;
                for (p, &ad) in parents.iter().zip(&axis_dims) {
                    let gsrc = &g[(o * total_axis + off) * inner..(o * total_axis + off + ad) * inner];
                    p.accum_grad(|gp| {
                        let dst = &mut gp[o * ad * inner..(o + 1) * ad * inner];
                        for i in 0..dst.len() {
                            dst[i] = dst[i] + gsrc[i];
                        }
                    });
                    off += ad;
                }
            }
        }),
    ))
}

/// Contiguous slice [start, start+len) along one axis.
pub fn narrow<E: Scalar>(a: &Tensor<E>, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
    let rank = a.shape().len();
    if axis >= rank || start + len > a.shape()[axis] || len == 0 {
        return Err(Error::BadShape {
            op: "narrow",
            shape: a.shape().to_vec(),
            why: format!("axis {axis} range {start}..{} invalid", start + len),
        });
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let d = a.shape()[axis];
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    let ad = a.data();
    let mut out = vec![E::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &ad[(o * d + start) * inner..(o * d + start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Ok(Tensor::from_op(
        shape,
        out,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accum_grad(|ga| {
                for o in 0..outer {
                    let dst = &mut ga[(o * d + start) * inner..(o * d + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for i in 0..dst.len() {
                        dst[i] = dst[i] + src[i];
                    }
                }
            });
        }),
    ))
}

pub fn sum_all<E: Scalar>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let mut acc = E::zero();
    for &v in a.data() {
        acc = acc + v;
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![acc],
        vec![a.clone()],
        Box::new(|_, g, parents| {
            let gv = g[0];
            parents[0].accum_grad(|ga| {
                for x in ga.iter_mut() {
                    *x = *x + gv;
                }
            });
        }),
    ))
}

pub fn mean_all<E: Scalar>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let n = a.numel();
    Ok(scale(&sum_all(a)?, E::one() / E::c(n as f64)))
}

/// Sum along one axis, removing it from the shape.
pub fn sum_axis<E: Scalar>(a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let rank = a.shape().len();
    if axis >= rank {
        return Err(Error::BadShape {
            op: "sum_axis",
            shape: a.shape().to_vec(),
            why: format!("axis {axis} out of range"),
        });
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let d = a.shape()[axis];
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    let ad = a.data();
    let mut out = vec![E::zero(); outer * inner];
    for o in 0..outer {
        for t in 0..d {
            let src = &ad[(o * d + t) * inner..(o * d + t + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..inner {
                dst[i] = dst[i] + src[i];
            }
        }
    }
    Ok(Tensor::from_op(
        shape,
        out,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            parents[0].accum_grad(|ga| {
                for o in 0..outer {
                    let gsrc = &g[o * inner..(o + 1) * inner];
                    for t in 0..d {
                        let dst = &mut ga[(o * d + t) * inner..(o * d + t + 1) * inner];
                        for i in 0..inner {
                            dst[i] = dst[i] + gsrc[i];
                        }
                    }
                }
            });
        }),
    ))
}

fn lane_dims<E: Scalar>(op: &'static str, a: &Tensor<E>, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= a.shape().len() {
        return Err(Error::BadShape {
            op,
            shape: a.shape().to_vec(),
            why: format!("axis {axis} out of range"),
        });
    }
    let outer = a.shape()[..axis].iter().product();
    let inner = a.shape()[axis + 1..].iter().product();
    Ok((outer, a.shape()[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<E: Scalar>(a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let (outer, d, inner) = lane_dims("softmax", a, axis)?;
    let ad = a.data();
    let mut out = vec![E::zero(); ad.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * d + t) * inner + i;
            let mut m = ad[idx(0)];
            for t in 1..d {
                if ad[idx(t)] > m {
                    m = ad[idx(t)];
                }
            }
            let mut denom = E::zero();
            for t in 0..d {
                let e = (ad[idx(t)] - m).exp();
                out[idx(t)] = e;
                denom = denom + e;
            }
            for t in 0..d {
                out[idx(t)] = out[idx(t)] / denom;
            }
        }
    }
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |y, g, parents| {
            parents[0].accum_grad(|ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * d + t) * inner + i;
                        let mut dot = E::zero();
                        for t in 0..d {
                            dot = dot + g[idx(t)] * y[idx(t)];
                        }
                        for t in 0..d {
                            ga[idx(t)] = ga[idx(t)] + y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            });
        }),
    ))
}

/// log(softmax) along `axis`, computed directly for stability.
pub fn log_softmax<E: Scalar>(a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let (outer, d, inner) = lane_dims("log_softmax", a, axis)?;
    let ad = a.data();
    let mut out = vec![E::zero(); ad.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * d + t) * inner + i;
            let mut m = ad[idx(0)];
            for t in 1..d {
                if ad[idx(t)] > m {
                    m = ad[idx(t)];
                }
            }
            let mut denom = E::zero();
            for t in 0..d {
                denom = denom + (ad[idx(t)] - m).exp();
            }
            let lse = m + denom.ln();
            for t in 0..d {
                out[idx(t)] = ad[idx(t)] - lse;
            }
        }
    }
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |y, g, parents| {
            parents[0].accum_grad(|ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * d + t) * inner + i;
                        let mut gsum = E::zero();
                        for t in 0..d {
                            gsum = gsum + g[idx(t)];
                        }
                        for t in 0..d {
                            ga[idx(t)] = ga[idx(t)] + g[idx(t)] - y[idx(t)].exp() * gsum;
                        }
                    }
                }
            });
        }),
    ))
}

/// Tanh-form gelu.
pub fn gelu<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let c0 = E::c(0.7978845608028654); // sqrt(2/pi)
    let c1 = E::c(0.044715);
    let half = E::c(0.5);
    let data = a
        .data()
        .iter()
        .map(|&x| {
            let u = c0 * (x + c1 * x * x * x);
            half * x * (E::one() + u.tanh())
        })
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, g, parents| {
            let xd = parents[0].data();
            parents[0].accum_grad(|ga| {
                for i in 0..ga.len() {
                    let x = xd[i];
                    let u = c0 * (x + c1 * x * x * x);
                    let t = u.tanh();
                    let du = c0 * (E::one() + E::c(3.0) * c1 * x * x);
                    let dy = half * (E::one() + t) + half * x * (E::one() - t * t) * du;
                    ga[i] = ga[i] + g[i] * dy;
                }
            });
        }),
    )
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learnable scale and shift.
pub fn layernorm<E: Scalar>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<Tensor<E>> {
    let rank = x.shape().len();
    if rank == 0 {
        return Err(Error::BadShape {
            op: "layernorm",
            shape: x.shape().to_vec(),
            why: "rank >= 1 required".into(),
        });
    }
    let c = x.shape()[rank - 1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / c;
    let eps = E::c(LAYERNORM_EPS);
    let cn = E::c(c as f64);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![E::zero(); xd.len()];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let mut mu = E::zero();
        for &v in row {
            mu = mu + v;
        }
        mu = mu / cn;
        let mut var = E::zero();
        for &v in row {
            var = var + (v - mu) * (v - mu);
        }
        var = var / cn;
        let inv = E::one() / (var + eps).sqrt();
        for j in 0..c {
            out[r * c + j] = gd[j] * (row[j] - mu) * inv + bd[j];
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |_, g, parents| {
            let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
            let xd = x.data();
            let gd = gamma.data();
            // per-row stats recomputed; cheaper than saving them
            let mut xhat = vec![E::zero(); c];
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let grow = &g[r * c..(r + 1) * c];
                let mut mu = E::zero();
                for &v in row {
                    mu = mu + v;
                }
                mu = mu / cn;
                let mut var = E::zero();
                for &v in row {
                    var = var + (v - mu) * (v - mu);
                }
                var = var / cn;
                let inv = E::one() / (var + eps).sqrt();
                for j in 0..c {
                    xhat[j] = (row[j] - mu) * inv;
                }
                let mut s1 = E::zero();
                let mut s2 = E::zero();
                for j in 0..c {
                    let h = grow[j] * gd[j];
                    s1 = s1 + h;
                    s2 = s2 + h * xhat[j];
                }
                x.accum_grad(|gx| {
                    for j in 0..c {
                        let h = grow[j] * gd[j];
                        gx[r * c + j] = gx[r * c + j] + inv * (h - s1 / cn - xhat[j] * s2 / cn);
                    }
                });
                gamma.accum_grad(|gg| {
                    for j in 0..c {
                        gg[j] = gg[j] + grow[j] * xhat[j];
                    }
                });
                beta.accum_grad(|gb| {
                    for j in 0..c {
                        gb[j] = gb[j] + grow[j];
                    }
                });
            }
        }),
    ))
}

//! Factorized attention, conv-attention with a depthwise positional term,
//! multi-head cross-attention between two image lanes, and the residual
//! block wrapper around conv-attention.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_ops::depthwise_conv2d;
use crate::ops::*;
use crate::param::{join, trunc_normal, uniform_fan_in, zeros_param, ones_param, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token matrix [L, C] with the spatial layout of its image tokens.
/// A CLS token, when present, sits at row 0.
#[derive(Clone)]
pub struct TokenSeq<E: Scalar> {
    pub tokens: Tensor<E>,
    pub spatial: (usize, usize),
    pub has_cls: bool,
}

impl<E: Scalar> TokenSeq<E> {
    pub fn new(tokens: Tensor<E>, spatial: (usize, usize), has_cls: bool) -> Result<Self> {
        let (h, w) = spatial;
        let want = h * w + usize::from(has_cls);
        if tokens.shape().len() != 2 || tokens.shape()[0] != want {
            return Err(Error::BadShape {
                op: "token_seq",
                shape: tokens.shape().to_vec(),
                why: format!("expected {want} rows for {h}x{w} image, cls={has_cls}"),
            });
        }
        Ok(Self { tokens, spatial, has_cls })
    }

    /// `[C,H,W]` image -> `[H*W, C]` tokens, no CLS.
    pub fn from_image(img: &Tensor<E>) -> Result<Self> {
        let (c, h, w) = match img.shape() {
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(Error::BadShape {
                    op: "token_seq",
                    shape: img.shape().to_vec(),
                    why: "rank 3 [C,H,W] required".into(),
                })
            }
        };
        let tokens = transpose2d(&reshape(img, &[c, h * w])?)?;
        Self::new(tokens, (h, w), false)
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Image-token rows (CLS dropped), as `[C,H,W]`.
    pub fn to_image(&self) -> Result<Tensor<E>> {
        let (h, w) = self.spatial;
        let c = self.channels();
        let img_rows = if self.has_cls {
            narrow(&self.tokens, 0, 1, h * w)?
        } else {
            self.tokens.clone()
        };
        reshape(&transpose2d(&img_rows)?, &[c, h, w])
    }
}

/// Projection weights for one attention op. `pos` is the depthwise
/// positional kernel, present only where conv-attention uses it.
pub struct AttnWeights<E: Scalar> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub pos: Option<Tensor<E>>,
    pub heads: usize,
}

pub const POS_KERNEL_SIZE: usize = 3;

impl<E: Scalar> AttnWeights<E> {
    pub fn new(c: usize, heads: usize, with_pos: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("channels {c} not divisible by {heads} heads")));
        }
        let k = POS_KERNEL_SIZE;
        Ok(Self {
            wq: trunc_normal(&[c, c], 0.02, rng),
            wk: trunc_normal(&[c, c], 0.02, rng),
            wv: trunc_normal(&[c, c], 0.02, rng),
            pos: with_pos.then(|| uniform_fan_in(&[c, k, k], k * k, rng)),
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.wq.shape()[0] / self.heads
    }
}

impl<E: Scalar> ParamVisit<E> for AttnWeights<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        if let Some(p) = &self.pos {
            f(&join(prefix, "pos"), p);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        if let Some(p) = &mut self.pos {
            f(&join(prefix, "pos"), p);
        }
    }
}

/// Per head j: (Q_j / sqrt(d)) · (softmax_over_tokens(K_j)ᵀ · V_j).
/// The L×L score matrix is never formed.
pub fn factor_attn<E: Scalar>(x: &TokenSeq<E>, w: &AttnWeights<E>) -> Result<Tensor<E>> {
    let c = x.channels();
    if w.wq.shape() != [c, c] || c % w.heads != 0 {
        return Err(Error::Config(format!(
            "factor_attn: weights {:?} incompatible with {c} channels / {} heads",
            w.wq.shape(),
            w.heads
        )));
    }
    let d = c / w.heads;
    let inv_sqrt_d = E::c(1.0 / (d as f64).sqrt());
    let q = matmul(&x.tokens, &w.wq)?;
    let k = matmul(&x.tokens, &w.wk)?;
    let v = matmul(&x.tokens, &w.wv)?;
    let mut heads = Vec::with_capacity(w.heads);
    for j in 0..w.heads {
        let qj = narrow(&q, 1, j * d, d)?;
        let kj = narrow(&k, 1, j * d, d)?;
        let vj = narrow(&v, 1, j * d, d)?;
        let attn = softmax(&kj, 0)?;
        let kv = matmul(&transpose2d(&attn)?, &vj)?;
        heads.push(scale(&matmul(&qj, &kv)?, inv_sqrt_d));
    }
    concat(&heads, 1)
}

/// FactorAttn(x) + α, where α = (X·W_q) ∘ Depthwise(P, image(X·W_v)) on
/// image tokens and zero on the CLS row.
pub fn conv_attn<E: Scalar>(x: &TokenSeq<E>, w: &AttnWeights<E>) -> Result<Tensor<E>> {
    let pos = w.pos.as_ref().ok_or_else(|| {
        Error::Config("conv_attn requires a positional kernel".into())
    })?;
    let f = factor_attn(x, w)?;
    let (h, wd) = x.spatial;
    let limg = h * wd;
    let c = x.channels();
    let q = matmul(&x.tokens, &w.wq)?;
    let v = matmul(&x.tokens, &w.wv)?;
    let v_img_rows = if x.has_cls { narrow(&v, 0, 1, limg)? } else { v };
    let v_img = reshape(&transpose2d(&v_img_rows)?, &[c, h, wd])?;
    let dw = depthwise_conv2d(&v_img, pos)?;
    let dw_rows = transpose2d(&reshape(&dw, &[c, limg])?)?;
    let pos_rows = if x.has_cls {
        concat(&[Tensor::zeros(&[1, c]), dw_rows], 0)?
    } else {
        dw_rows
    };
    let alpha = mul(&q, &pos_rows)?;
    add(&f, &alpha)
}

/// Multi-head attention between two `[C,H,W]` maps: queries from `goal`,
/// keys/values from `cur`. Softmax runs along cur's token axis.
pub fn cross_attn<E: Scalar>(
    goal: &Tensor<E>,
    cur: &Tensor<E>,
    w: &AttnWeights<E>,
) -> Result<Tensor<E>> {
    if goal.shape() != cur.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_attn",
            lhs: goal.shape().to_vec(),
            rhs: cur.shape().to_vec(),
        });
    }
    let tg = TokenSeq::from_image(goal)?;
    let tc = TokenSeq::from_image(cur)?;
    let c = tg.channels();
    if c % w.heads != 0 || w.wq.shape() != [c, c] {
        return Err(Error::Config(format!(
            "cross_attn: weights {:?} incompatible with {c} channels / {} heads",
            w.wq.shape(),
            w.heads
        )));
    }
    let d = c / w.heads;
    let inv_sqrt_d = E::c(1.0 / (d as f64).sqrt());
    let q = matmul(&tg.tokens, &w.wq)?;
    let k = matmul(&tc.tokens, &w.wk)?;
    let v = matmul(&tc.tokens, &w.wv)?;
    let mut heads = Vec::with_capacity(w.heads);
    for j in 0..w.heads {
        let qj = narrow(&q, 1, j * d, d)?;
        let kj = narrow(&k, 1, j * d, d)?;
        let vj = narrow(&v, 1, j * d, d)?;
        let scores = scale(&matmul(&qj, &transpose2d(&kj)?)?, inv_sqrt_d);
        let attn = softmax(&scores, 1)?;
        heads.push(matmul(&attn, &vj)?);
    }
    let out = concat(&heads, 1)?;
    let (h, wd) = tg.spatial;
    reshape(&transpose2d(&out)?, &[c, h, wd])
}

pub struct LayerNormParams<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Scalar> LayerNormParams<E> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: ones_param(&[c]),
            beta: zeros_param(&[c]),
        }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        layernorm(x, &self.gamma, &self.beta)
    }
}

impl<E: Scalar> ParamVisit<E> for LayerNormParams<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Two-layer MLP with hidden width 4C and gelu.
pub struct MlpParams<E: Scalar> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

impl<E: Scalar> MlpParams<E> {
    pub fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: trunc_normal(&[c, 4 * c], 0.02, rng),
            b1: zeros_param(&[4 * c]),
            w2: trunc_normal(&[4 * c, c], 0.02, rng),
            b2: zeros_param(&[c]),
        }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = gelu(&add_row(&matmul(x, &self.w1)?, &self.b1)?);
        add_row(&matmul(&h, &self.w2)?, &self.b2)
    }
}

impl<E: Scalar> ParamVisit<E> for MlpParams<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

/// Pre-norm conv-attention + residual, then pre-norm MLP + residual.
pub struct ConvAttnLayer<E: Scalar> {
    pub norm1: LayerNormParams<E>,
    pub attn: AttnWeights<E>,
    pub norm2: LayerNormParams<E>,
    pub mlp: MlpParams<E>,
}

impl<E: Scalar> ConvAttnLayer<E> {
    pub fn new(c: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(c),
            attn: AttnWeights::new(c, heads, true, rng)?,
            norm2: LayerNormParams::new(c),
            mlp: MlpParams::new(c, rng),
        })
    }

    pub fn forward(&self, x: &TokenSeq<E>) -> Result<TokenSeq<E>> {
        let normed = TokenSeq {
            tokens: self.norm1.apply(&x.tokens)?,
            spatial: x.spatial,
            has_cls: x.has_cls,
        };
        let attended = add(&x.tokens, &conv_attn(&normed, &self.attn)?)?;
        let out = add(&attended, &self.mlp.apply(&self.norm2.apply(&attended)?)?)?;
        Ok(TokenSeq {
            tokens: out,
            spatial: x.spatial,
            has_cls: x.has_cls,
        })
    }
}

impl<E: Scalar> ParamVisit<E> for ConvAttnLayer<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// A stack of conv-attention layers; shape-preserving.
pub struct ConvAttnModule<E: Scalar> {
    pub layers: Vec<ConvAttnLayer<E>>,
}

impl<E: Scalar> ConvAttnModule<E> {
    pub fn new(c: usize, heads: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("conv_attn_module needs at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|_| ConvAttnLayer::new(c, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &TokenSeq<E>) -> Result<TokenSeq<E>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }
}

impl<E: Scalar> ParamVisit<E> for ConvAttnModule<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

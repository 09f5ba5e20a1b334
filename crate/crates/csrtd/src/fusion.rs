//! Stage-by-stage fusion of the two feature pyramids: concatenation,
//! learnable downsampling, and multi-head cross-attention scores.

use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_attn, AttnWeights, LayerNormParams, TokenSeq};
use crate::error::{Error, Result};
use crate::image_ops::{avgpool2x, conv2d};
use crate::ops::concat;
use crate::param::{join, uniform_fan_in, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Model variants from the ablation study. Full keeps the cross-attention
/// scores as-is; CrossThenSelf runs self-attention over the scores;
/// NoCrossAttention drops the score channels entirely.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Ablation {
    NoCrossAttention,
    CrossThenSelf,
    Full,
}

impl Ablation {
    /// Table row labels used on the command line.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoCrossAttention => "ii",
            Ablation::CrossThenSelf => "iii",
            Ablation::Full => "iv",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "ii" => Ok(Ablation::NoCrossAttention),
            "iii" => Ok(Ablation::CrossThenSelf),
            "iv" => Ok(Ablation::Full),
            _ => Err(Error::Config(format!("unknown ablation '{s}' (expected ii, iii or iv)"))),
        }
    }
}

/// Fused-tensor channel count per stage (0-based index over M stages):
/// 2C₁ at stage 1; C_{i−1}+2C_i at stage 2 and stage M; C_{i−1}+3C_i in
/// between (the extra C_i is the cross-attention score, absent under
/// NoCrossAttention).
pub fn z_channels(channels: &[usize], ablation: Ablation) -> Vec<usize> {
    let m = channels.len();
    (0..m)
        .map(|i| {
            if i == 0 {
                2 * channels[0]
            } else if i == m - 1 || i == 1 || ablation == Ablation::NoCrossAttention {
                channels[i - 1] + 2 * channels[i]
            } else {
                channels[i - 1] + 3 * channels[i]
            }
        })
        .collect()
}

/// 2x2 average pool, then 1x1 conv to `target_c`, then layernorm over
/// channels.
pub struct DownsampleFuse<E: Scalar> {
    pub proj: Tensor<E>,
    pub norm: LayerNormParams<E>,
}

impl<E: Scalar> DownsampleFuse<E> {
    pub fn new(c_in: usize, target_c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: uniform_fan_in(&[target_c, c_in, 1, 1], c_in, rng),
            norm: LayerNormParams::new(target_c),
        }
    }

    pub fn apply(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        let pooled = avgpool2x(z)?;
        let projected = conv2d(&pooled, &self.proj, 1, 0)?;
        channel_layernorm(&projected, &self.norm)
    }
}

fn channel_layernorm<E: Scalar>(img: &Tensor<E>, norm: &LayerNormParams<E>) -> Result<Tensor<E>> {
    let seq = TokenSeq::from_image(img)?;
    TokenSeq::new(norm.apply(&seq.tokens)?, seq.spatial, false)?.to_image()
}

impl<E: Scalar> ParamVisit<E> for DownsampleFuse<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "proj"), &self.proj);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "proj"), &mut self.proj);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Cross-attention score producer for one middle stage. Queries come from
/// the goal lane. Under CrossThenSelf the score map additionally attends to
/// itself with a second set of weights.
pub struct CrossStage<E: Scalar> {
    pub attn: AttnWeights<E>,
    pub self_attn: Option<AttnWeights<E>>,
}

impl<E: Scalar> CrossStage<E> {
    pub fn new(c: usize, heads: usize, with_self: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            attn: AttnWeights::new(c, heads, false, rng)?,
            self_attn: with_self
                .then(|| AttnWeights::new(c, heads, false, rng))
                .transpose()?,
        })
    }

    pub fn forward(&self, h_goal: &Tensor<E>, h_cur: &Tensor<E>) -> Result<Tensor<E>> {
        let s = cross_attn(h_goal, h_cur, &self.attn)?;
        match &self.self_attn {
            Some(w) => cross_attn(&s, &s, w),
            None => Ok(s),
        }
    }
}

impl<E: Scalar> ParamVisit<E> for CrossStage<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        if let Some(s) = &self.self_attn {
            s.visit(&join(prefix, "self_attn"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        if let Some(s) = &mut self.self_attn {
            s.visit_mut(&join(prefix, "self_attn"), f);
        }
    }
}

/// Produces {z^(i)} and the channel-projected z_down^(M) from the two lane
/// pyramids.
pub struct CrossEncoder<E: Scalar> {
    pub down: Vec<DownsampleFuse<E>>,
    pub cross: Vec<CrossStage<E>>,
    pub final_proj: Tensor<E>,
    pub ablation: Ablation,
}

impl<E: Scalar> CrossEncoder<E> {
    pub fn new(
        channels: &[usize],
        heads: usize,
        ablation: Ablation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m = channels.len();
        if m < 2 {
            return Err(Error::Config("fusion needs at least two stages".into()));
        }
        let zc = z_channels(channels, ablation);
        let down = (0..m - 1)
            .map(|i| DownsampleFuse::new(zc[i], channels[i], rng))
            .collect();
        let cross = if ablation == Ablation::NoCrossAttention {
            Vec::new()
        } else {
            (2..m.max(2) - 1)
                .map(|i| {
                    CrossStage::new(channels[i], heads, ablation == Ablation::CrossThenSelf, rng)
                })
                .collect::<Result<_>>()?
        };
        let final_proj = uniform_fan_in(&[channels[m - 1], zc[m - 1], 1, 1], zc[m - 1], rng);
        Ok(Self { down, cross, final_proj, ablation })
    }

    /// Returns (z per stage, z_down^(M)). z_down^(M) keeps z^(M)'s spatial
    /// size; only channels change.
    pub fn fuse(
        &self,
        h_goal: &[Tensor<E>],
        h_cur: &[Tensor<E>],
    ) -> Result<(Vec<Tensor<E>>, Tensor<E>)> {
        let m = self.down.len() + 1;
        if h_goal.len() != m || h_cur.len() != m {
            return Err(Error::Config(format!(
                "fusion built for {m} stages, got {} goal / {} cur",
                h_goal.len(),
                h_cur.len()
            )));
        }
        let mut zs: Vec<Tensor<E>> = Vec::with_capacity(m);
        let mut z = concat(&[h_goal[0].clone(), h_cur[0].clone()], 0)?;
        zs.push(z.clone());
        for i in 1..m {
            let z_down_prev = self.down[i - 1].apply(&z)?;
            let mut parts = vec![z_down_prev];
            if i >= 2 && i < m - 1 && self.ablation != Ablation::NoCrossAttention {
                parts.push(self.cross[i - 2].forward(&h_goal[i], &h_cur[i])?);
            }
            parts.push(h_goal[i].clone());
            parts.push(h_cur[i].clone());
            z = concat(&parts, 0)?;
            zs.push(z.clone());
        }
        let z_down_m = conv2d(&z, &self.final_proj, 1, 0)?;
        Ok((zs, z_down_m))
    }
}

impl<E: Scalar> ParamVisit<E> for CrossEncoder<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, d) in self.down.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, c) in self.cross.iter().enumerate() {
            c.visit(&join(prefix, &format!("cross{}", i + 3)), f);
        }
        f(&join(prefix, "final_proj"), &self.final_proj);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, c) in self.cross.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("cross{}", i + 3)), f);
        }
        f(&join(prefix, "final_proj"), &mut self.final_proj);
    }
}

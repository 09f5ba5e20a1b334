//! Decoder: projects the fused pyramid back up to a full-resolution
//! 2-channel logit map via correlation features, conv-attention stages and
//! bilinear upsampling, then binarizes.

use rand_chacha::ChaCha8Rng;

use crate::attention::{ConvAttnModule, LayerNormParams, TokenSeq};
use crate::error::{Error, Result};
use crate::image_ops::{conv2d, correlate, upsample2x};
use crate::ops::concat;
use crate::param::{join, uniform_fan_in, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest displacement window that fits the stage, floor 1.
pub fn corr_displacement(h: usize) -> usize {
    (h / 2).clamp(1, 3)
}

/// 1x1 projection + channel layernorm + conv-attention layers. Spatial size
/// is preserved; upsampling happens outside.
pub struct DecoderStage<E: Scalar> {
    pub patch_proj: Tensor<E>,
    pub patch_norm: LayerNormParams<E>,
    pub attn_module: ConvAttnModule<E>,
}

impl<E: Scalar> DecoderStage<E> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        heads: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            patch_proj: uniform_fan_in(&[c_out, c_in, 1, 1], c_in, rng),
            patch_norm: LayerNormParams::new(c_out),
            attn_module: ConvAttnModule::new(c_out, heads, n_layers, rng)?,
        })
    }

    pub fn forward(&self, img: &Tensor<E>) -> Result<Tensor<E>> {
        let projected = conv2d(img, &self.patch_proj, 1, 0)?;
        let seq = TokenSeq::from_image(&projected)?;
        let normed = TokenSeq::new(self.patch_norm.apply(&seq.tokens)?, seq.spatial, false)?;
        self.attn_module.forward(&normed)?.to_image()
    }
}

impl<E: Scalar> ParamVisit<E> for DecoderStage<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "proj"), &self.patch_proj);
        self.patch_norm.visit(&join(prefix, "norm"), f);
        self.attn_module.visit(&join(prefix, "module"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "proj"), &mut self.patch_proj);
        self.patch_norm.visit_mut(&join(prefix, "norm"), f);
        self.attn_module.visit_mut(&join(prefix, "module"), f);
    }
}

/// Full decoding chain from {z^(i)}, z_down^(M) to [2, S, S] logits.
pub struct Decoder<E: Scalar> {
    /// `stages[j]` handles 1-based stage M-j, covering stages M down to 2.
    pub stages: Vec<DecoderStage<E>>,
    pub stage1: DecoderStage<E>,
    pub final_conv: Tensor<E>,
    dims: Vec<(usize, usize, usize)>,
}

impl<E: Scalar> Decoder<E> {
    /// `dims` is the stage schedule (H_i, W_i, C_i); `zc` the fused channel
    /// counts per stage.
    pub fn new(
        dims: &[(usize, usize, usize)],
        zc: &[usize],
        heads: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m = dims.len();
        if m < 2 || zc.len() != m {
            return Err(Error::Config("decoder needs >= 2 conforming stages".into()));
        }
        let c = |s: usize| dims[s].2;
        if c(0) % 2 != 0 {
            return Err(Error::Config("stage-1 channel count must be even".into()));
        }
        let mut stages = Vec::with_capacity(m - 1);
        let corr_m = (2 * corr_displacement(dims[m - 1].0) + 1).pow(2);
        stages.push(DecoderStage::new(
            c(m - 1) + zc[m - 1] + corr_m,
            c(m - 2),
            heads,
            n_layers,
            rng,
        )?);
        for s in (1..=m.saturating_sub(2)).rev() {
            let corr = if s == 1 {
                (2 * corr_displacement(dims[1].0) + 1).pow(2)
            } else {
                0
            };
            stages.push(DecoderStage::new(c(s) + zc[s] + corr, c(s - 1), heads, n_layers, rng)?);
        }
        let half = c(0) / 2;
        let stage1 = DecoderStage::new(c(0) + zc[0], half, heads, n_layers, rng)?;
        let final_conv = uniform_fan_in(&[2, half, 1, 1], half, rng);
        Ok(Self { stages, stage1, final_conv, dims: dims.to_vec() })
    }

    fn expect_shape(t: &Tensor<E>, want: &[usize], what: &str) -> Result<()> {
        if t.shape() != want {
            return Err(Error::Contract(format!(
                "{what}: got {:?}, want {:?}",
                t.shape(),
                want
            )));
        }
        Ok(())
    }

    pub fn decode(&self, zs: &[Tensor<E>], z_down_m: &Tensor<E>) -> Result<Tensor<E>> {
        let mut sink = Vec::new();
        self.decode_traced(zs, z_down_m, &mut sink)
    }

    /// Same as `decode` but records each intermediate (label, shape).
    pub fn decode_traced(
        &self,
        zs: &[Tensor<E>],
        z_down_m: &Tensor<E>,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Tensor<E>> {
        let m = self.dims.len();
        if zs.len() != m {
            return Err(Error::Config(format!("decoder built for {m} stages, got {}", zs.len())));
        }
        let c = |s: usize| self.dims[s].2;
        let (hm, wm, _) = self.dims[m - 1];
        let d_m = corr_displacement(hm);
        let t_in = concat(
            &[z_down_m.clone(), zs[m - 1].clone(), correlate(&zs[m - 1], d_m)?],
            0,
        )?;
        Self::expect_shape(&t_in, &[z_down_m.shape()[0] + zs[m - 1].shape()[0] + (2 * d_m + 1).pow(2) as usize, hm, wm], "decoder stage-M input")?;
        let mut u = upsample2x(&self.stages[0].forward(&t_in)?)?;
        trace.push((format!("u{m}"), u.shape().to_vec()));
        let mut stage_idx = 1;
        for s in (1..=m.saturating_sub(2)).rev() {
            let (h, w, _) = self.dims[s];
            Self::expect_shape(&u, &[c(s), h, w], "decoder upsampled features")?;
            let mut parts = vec![u.clone(), zs[s].clone()];
            if s == 1 {
                parts.push(correlate(&zs[1], corr_displacement(h))?);
            }
            let t_in = concat(&parts, 0)?;
            u = upsample2x(&self.stages[stage_idx].forward(&t_in)?)?;
            trace.push((format!("u{}", s + 1), u.shape().to_vec()));
            stage_idx += 1;
        }
        let (h1, w1, _) = self.dims[0];
        Self::expect_shape(&u, &[c(0), h1, w1], "decoder stage-1 input")?;
        let t1 = concat(&[u, zs[0].clone()], 0)?;
        let u1 = upsample2x(&upsample2x(&self.stage1.forward(&t1)?)?)?;
        Self::expect_shape(&u1, &[c(0) / 2, 4 * h1, 4 * w1], "full-resolution features")?;
        trace.push(("u1".into(), u1.shape().to_vec()));
        let logits = conv2d(&u1, &self.final_conv, 1, 0)?;
        trace.push(("logits".into(), logits.shape().to_vec()));
        Ok(logits)
    }
}

impl<E: Scalar> ParamVisit<E> for Decoder<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        let m = self.dims.len();
        for (j, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", m - j)), f);
        }
        self.stage1.visit(&join(prefix, "stage1"), f);
        f(&join(prefix, "final"), &self.final_conv);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        let m = self.dims.len();
        for (j, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", m - j)), f);
        }
        self.stage1.visit_mut(&join(prefix, "stage1"), f);
        f(&join(prefix, "final"), &mut self.final_conv);
    }
}

/// Pixelwise argmax over the two logit channels; channel 1 = changed.
/// Ties resolve to 0.
pub fn binarize<E: Scalar>(logits: &Tensor<E>) -> Result<Vec<u8>> {
    let (h, w) = match logits.shape() {
        [2, h, w] => (*h, *w),
        _ => {
            return Err(Error::BadShape {
                op: "binarize",
                shape: logits.shape().to_vec(),
                why: "expected [2, S, S] logits".into(),
            })
        }
    };
    let d = logits.data();
    Ok((0..h * w).map(|p| u8::from(d[h * w + p] > d[p])).collect())
}

//! Serial encoder: a pyramid of patch-embed + conv-attention blocks applied
//! to the goal and current images, either with Siamese (shared) or
//! independent per-lane weights.

use rand_chacha::ChaCha8Rng;

use crate::attention::{ConvAttnModule, LayerNormParams, TokenSeq};
use crate::error::{Error, Result};
use crate::image_ops::conv2d;
use crate::ops::{concat, reshape};
use crate::param::{join, uniform_fan_in, trunc_normal, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One pyramid stage: strided patch embedding, CLS token, attention layers.
/// The CLS token is injected before the attention module and dropped after.
pub struct SerialBlock<E: Scalar> {
    pub patch_kernel: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
    pub patch_norm: LayerNormParams<E>,
    pub cls_token: Tensor<E>,
    pub attn_module: ConvAttnModule<E>,
}

impl<E: Scalar> SerialBlock<E> {
    /// Stage 1 embeds with kernel 7 stride 4; later stages with kernel 3
    /// stride 2.
    pub fn new(
        stage: usize,
        c_in: usize,
        c_out: usize,
        n_layers: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (k, stride, padding) = if stage == 0 { (7, 4, 3) } else { (3, 2, 1) };
        Ok(Self {
            patch_kernel: uniform_fan_in(&[c_out, c_in, k, k], c_in * k * k, rng),
            stride,
            padding,
            patch_norm: LayerNormParams::new(c_out),
            cls_token: trunc_normal(&[c_out], 0.02, rng),
            attn_module: ConvAttnModule::new(c_out, heads, n_layers, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = match x.shape() {
            [_, h, w] => (*h, *w),
            _ => {
                return Err(Error::BadShape {
                    op: "serial_block",
                    shape: x.shape().to_vec(),
                    why: "rank 3 [C,H,W] required".into(),
                })
            }
        };
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::Config(format!(
                "serial block stride {} does not divide input {h}x{w}",
                self.stride
            )));
        }
        let embedded = conv2d(x, &self.patch_kernel, self.stride, self.padding)?;
        let seq = TokenSeq::from_image(&embedded)?;
        let c = seq.channels();
        let normed = self.patch_norm.apply(&seq.tokens)?;
        let cls_row = reshape(&self.cls_token, &[1, c])?;
        let with_cls = TokenSeq::new(concat(&[cls_row, normed], 0)?, seq.spatial, true)?;
        let out = self.attn_module.forward(&with_cls)?;
        out.to_image()
    }
}

impl<E: Scalar> ParamVisit<E> for SerialBlock<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&join(prefix, "patch"), &self.patch_kernel);
        self.patch_norm.visit(&join(prefix, "patch_norm"), f);
        f(&join(prefix, "cls"), &self.cls_token);
        self.attn_module.visit(&join(prefix, "module"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&join(prefix, "patch"), &mut self.patch_kernel);
        self.patch_norm.visit_mut(&join(prefix, "patch_norm"), f);
        f(&join(prefix, "cls"), &mut self.cls_token);
        self.attn_module.visit_mut(&join(prefix, "module"), f);
    }
}

/// The two-lane pyramid encoder. Shared mode applies one set of block
/// weights to both lanes (Siamese); PerLane keeps two independent sets.
pub enum SerialEncoder<E: Scalar> {
    Shared(Vec<SerialBlock<E>>),
    PerLane {
        goal: Vec<SerialBlock<E>>,
        cur: Vec<SerialBlock<E>>,
    },
}

impl<E: Scalar> SerialEncoder<E> {
    pub fn new(
        channels: &[usize],
        n_layers: usize,
        heads: usize,
        shared: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let build = |rng: &mut ChaCha8Rng| -> Result<Vec<SerialBlock<E>>> {
            let mut c_in = 3;
            let mut blocks = Vec::with_capacity(channels.len());
            for (i, &c) in channels.iter().enumerate() {
                blocks.push(SerialBlock::new(i, c_in, c, n_layers, heads, rng)?);
                c_in = c;
            }
            Ok(blocks)
        };
        Ok(if shared {
            SerialEncoder::Shared(build(rng)?)
        } else {
            SerialEncoder::PerLane {
                goal: build(rng)?,
                cur: build(rng)?,
            }
        })
    }

    fn run_lane(blocks: &[SerialBlock<E>], x: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let mut cur = x.clone();
        let mut pyramid = Vec::with_capacity(blocks.len());
        for b in blocks {
            cur = b.forward(&cur)?;
            pyramid.push(cur.clone());
        }
        Ok(pyramid)
    }

    /// Returns (goal pyramid, cur pyramid), stages 1..=M.
    pub fn encode_two_lanes(
        &self,
        goal: &Tensor<E>,
        cur: &Tensor<E>,
    ) -> Result<(Vec<Tensor<E>>, Vec<Tensor<E>>)> {
        if goal.shape() != cur.shape() {
            return Err(Error::ShapeMismatch {
                op: "encode_two_lanes",
                lhs: goal.shape().to_vec(),
                rhs: cur.shape().to_vec(),
            });
        }
        match self {
            SerialEncoder::Shared(blocks) => Ok((
                Self::run_lane(blocks, goal)?,
                Self::run_lane(blocks, cur)?,
            )),
            SerialEncoder::PerLane { goal: gb, cur: cb } => {
                Ok((Self::run_lane(gb, goal)?, Self::run_lane(cb, cur)?))
            }
        }
    }
}

impl<E: Scalar> ParamVisit<E> for SerialEncoder<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        match self {
            SerialEncoder::Shared(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("block{i}")), f);
                }
            }
            SerialEncoder::PerLane { goal, cur } => {
                for (i, b) in goal.iter().enumerate() {
                    b.visit(&join(prefix, &format!("goal.block{i}")), f);
                }
                for (i, b) in cur.iter().enumerate() {
                    b.visit(&join(prefix, &format!("cur.block{i}")), f);
                }
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        match self {
            SerialEncoder::Shared(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("block{i}")), f);
                }
            }
            SerialEncoder::PerLane { goal, cur } => {
                for (i, b) in goal.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("goal.block{i}")), f);
                }
                for (i, b) in cur.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("cur.block{i}")), f);
                }
            }
        }
    }
}

/// Placeholder for the residual-block encoder variant: records the shape
/// contract of a stage without any weights or forward pass.
pub struct ResBlockStub {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ResBlockStub {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [c, h, w] if *c == self.c_in && h % self.stride == 0 && w % self.stride == 0 => {
                Ok(vec![self.c_out, h / self.stride, w / self.stride])
            }
            _ => Err(Error::BadShape {
                op: "res_block_stub",
                shape: input.to_vec(),
                why: format!(
                    "expected [{}, k*{}, k*{}]",
                    self.c_in, self.stride, self.stride
                ),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_img(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn desk_stage1_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = SerialBlock::<f32>::new(0, 3, 16, 2, 8, &mut rng).unwrap();
        let x = rand_img(&mut rng, 3, 64, 64);
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), &[16, 16, 16]);
    }

    #[test]
    fn later_stage_halves_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = SerialBlock::<f32>::new(3, 80, 128, 2, 8, &mut rng).unwrap();
        let x = rand_img(&mut rng, 80, 4, 4);
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), &[128, 2, 2]);
    }

    #[test]
    fn identical_inputs_give_identical_pyramids_when_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = SerialEncoder::<f32>::new(&[16, 32], 1, 8, true, &mut rng).unwrap();
        let img = rand_img(&mut rng, 3, 16, 16);
        let (hg, hc) = enc.encode_two_lanes(&img, &img).unwrap();
        assert_eq!(hg.len(), 2);
        for (a, b) in hg.iter().zip(&hc) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn swapping_inputs_swaps_pyramids_when_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = SerialEncoder::<f32>::new(&[16, 32], 1, 8, true, &mut rng).unwrap();
        let a = rand_img(&mut rng, 3, 16, 16);
        let b = rand_img(&mut rng, 3, 16, 16);
        let (hg1, hc1) = enc.encode_two_lanes(&a, &b).unwrap();
        let (hg2, hc2) = enc.encode_two_lanes(&b, &a).unwrap();
        for i in 0..2 {
            assert_eq!(hg1[i].data(), hc2[i].data());
            assert_eq!(hc1[i].data(), hg2[i].data());
        }
    }

    #[test]
    fn shared_param_count_is_lane_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shared = SerialEncoder::<f32>::new(&[16, 32], 2, 8, true, &mut rng).unwrap();
        let per_lane = SerialEncoder::<f32>::new(&[16, 32], 2, 8, false, &mut rng).unwrap();
        let n_shared = crate::param::count_params(&shared);
        let n_split = crate::param::count_params(&per_lane);
        assert_eq!(n_split, 2 * n_shared);
    }

    #[test]
    fn res_block_stub_checks_shapes() {
        let stub = ResBlockStub { c_in: 3, c_out: 16, stride: 4 };
        assert_eq!(stub.output_shape(&[3, 64, 64]).unwrap(), vec![16, 16, 16]);
        assert!(stub.output_shape(&[4, 64, 64]).is_err());
        assert!(stub.output_shape(&[3, 63, 64]).is_err());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = SerialBlock::<f32>::new(1, 16, 32, 1, 8, &mut rng).unwrap();
        let x = rand_img(&mut rng, 16, 5, 5);
        assert!(block.forward(&x).is_err());
    }
}

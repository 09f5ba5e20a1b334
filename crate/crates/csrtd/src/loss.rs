//! Training loss: per-pixel cross-entropy plus soft Dice over the two mask
//! classes, both built from differentiable ops.

use crate::error::{Error, Result};
use crate::ops::{add, add_scalar, div, log_softmax, mul, narrow, scale, softmax, sum_all};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_sdice: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ce: 1.0, lambda_sdice: 1.0, epsilon: DICE_EPSILON }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ce < 0.0 || self.lambda_sdice < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config(
                "loss weights must be >= 0 with epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

fn mask_dims<E: Scalar>(logits: &Tensor<E>, y: &[u8]) -> Result<(usize, usize)> {
    let (h, w) = match logits.shape() {
        [2, h, w] => (*h, *w),
        _ => {
            return Err(Error::BadShape {
                op: "loss",
                shape: logits.shape().to_vec(),
                why: "expected [2, H, W] logits".into(),
            })
        }
    };
    if y.len() != h * w {
        return Err(Error::Contract(format!(
            "mask has {} pixels, logits cover {}",
            y.len(),
            h * w
        )));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("mask value {bad} outside {{0,1}}")));
    }
    Ok((h, w))
}

/// One-hot encode a {0,1} mask as a constant [2, H, W] tensor.
pub fn onehot<E: Scalar>(y: &[u8], h: usize, w: usize) -> Result<Tensor<E>> {
    if y.len() != h * w {
        return Err(Error::Contract(format!(
            "mask has {} pixels, expected {}",
            y.len(),
            h * w
        )));
    }
    let mut data = vec![E::zero(); 2 * h * w];
    for (p, &v) in y.iter().enumerate() {
        data[v as usize * h * w + p] = E::one();
    }
    Tensor::from_vec(&[2, h, w], data)
}

/// Mean over pixels of `-log softmax(logits)[y]`.
pub fn cross_entropy<E: Scalar>(logits: &Tensor<E>, y: &[u8]) -> Result<Tensor<E>> {
    let (h, w) = mask_dims(logits, y)?;
    let lsm = log_softmax(logits, 0)?;
    let picked = mul(&lsm, &onehot(y, h, w)?)?;
    Ok(scale(&sum_all(&picked)?, E::c(-1.0 / (h * w) as f64)))
}

/// 1 - (1/K) sum_k 2*sum(y_k p_k) / (sum y_k + sum p_k + eps).
/// `p` must hold class probabilities (per-pixel class sums = 1).
pub fn soft_dice<E: Scalar>(p: &Tensor<E>, y_onehot: &Tensor<E>, epsilon: f64) -> Result<Tensor<E>> {
    let shape = p.shape().to_vec();
    let (k, hw) = match shape[..] {
        [k, h, w] if k >= 2 => (k, h * w),
        _ => {
            return Err(Error::BadShape {
                op: "soft_dice",
                shape,
                why: "expected [K, H, W] probabilities with K >= 2".into(),
            })
        }
    };
    if y_onehot.shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_dice",
            lhs: p.shape().to_vec(),
            rhs: y_onehot.shape().to_vec(),
        });
    }
    {
        let d = p.data();
        for pix in 0..hw {
            let mut s = E::zero();
            for c in 0..k {
                s = s + d[c * hw + pix];
            }
            if (s - E::one()).abs() > E::c(1e-4) {
                return Err(Error::Contract(format!(
                    "probabilities at pixel {pix} sum to {:.6}, not 1",
                    s.to_f64().unwrap_or(f64::NAN)
                )));
            }
        }
    }
    let mut dice_sum: Option<Tensor<E>> = None;
    for c in 0..k {
        let pc = narrow(p, 0, c, 1)?;
        let yc = narrow(y_onehot, 0, c, 1)?;
        let inter = sum_all(&mul(&pc, &yc)?)?;
        let denom = add_scalar(&add(&sum_all(&pc)?, &sum_all(&yc)?)?, E::c(epsilon));
        let term = div(&scale(&inter, E::c(2.0)), &denom)?;
        dice_sum = Some(match dice_sum {
            None => term,
            Some(acc) => add(&acc, &term)?,
        });
    }
    Ok(add_scalar(&scale(&dice_sum.unwrap(), E::c(-1.0 / k as f64)), E::one()))
}

/// lambda_ce * cross_entropy + lambda_sdice * soft_dice(softmax(logits), onehot(y)).
pub fn total_loss<E: Scalar>(logits: &Tensor<E>, y: &[u8], w: &LossWeights) -> Result<Tensor<E>> {
    w.validate()?;
    let (h, wid) = mask_dims(logits, y)?;
    let ce = scale(&cross_entropy(logits, y)?, E::c(w.lambda_ce));
    let probs = softmax(logits, 0)?;
    let sd = soft_dice(&probs, &onehot(y, h, wid)?, w.epsilon)?;
    add(&ce, &scale(&sd, E::c(w.lambda_sdice)))
}

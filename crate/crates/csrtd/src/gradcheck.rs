//! Central finite-difference verification of analytic gradients, run in f64.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_ops::{avgpool2x, conv2d, correlate, depthwise_conv2d, upsample2x};
use crate::loss::{cross_entropy, onehot, soft_dice, total_loss, LossWeights, DICE_EPSILON};
use crate::model::{ModelConfig, RtdModel};
use crate::ops::*;
use crate::param::ParamVisit;
use crate::tensor::{NoGradGuard, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-3;

pub struct FdOutcome {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares analytic input gradients of a scalar-valued function against
/// central differences. `max_coords` caps how many coordinates per input are
/// probed (all of them when the input is small enough).
pub fn fd_scalar_loss<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: F,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FdOutcome>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::leaf(shape, data.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad_or_zeros()).collect();

    let eval = |datas: &[Vec<f64>]| -> Result<f64> {
        let ts: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), d)| Tensor::from_vec(shape, d.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&ts)?.item())
    };

    let mut datas: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for i in 0..inputs.len() {
        let n = datas[i].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let orig = datas[i][j];
            datas[i][j] = orig + FD_STEP;
            let lp = eval(&datas)?;
            datas[i][j] = orig - FD_STEP;
            let lm = eval(&datas)?;
            datas[i][j] = orig;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let an = grads[i][j];
            let rel = (fd - an).abs() / an.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdOutcome {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

fn rand_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..2.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// A weighted sum makes the loss sensitive to every output coordinate with
/// distinct weights, so sign and placement errors cannot cancel.
fn weighted_sum(y: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let w = Tensor::from_vec(y.shape(), rand_data(rng, y.numel()))?;
    sum_all(&mul(y, &w)?)
}

type CheckFn = Box<dyn Fn(u64) -> Result<f64>>;

/// One named finite-difference check per differentiable primitive. Each
/// returns the max relative error observed for the given seed.
pub fn primitive_checks() -> Vec<(&'static str, CheckFn)> {
    fn outcome<F>(seed: u64, inputs: Vec<(Vec<usize>, Vec<f64>)>, f: F) -> Result<f64>
    where
        F: Fn(&[Tensor<f64>], &mut ChaCha8Rng) -> Result<Tensor<f64>>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let wrng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d) | 1);
        let g = move |ts: &[Tensor<f64>]| {
            let mut wrng = wrng.clone();
            f(ts, &mut wrng)
        };
        Ok(fd_scalar_loss(&inputs, g, 64, &mut rng)?.max_rel_err)
    }
    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    let mut checks: Vec<(&'static str, CheckFn)> = Vec::new();

    checks.push((
        "add",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![2, 3, 4], rand_data(&mut r, 24)),
                (vec![2, 3, 4], rand_data(&mut r, 24)),
            ];
            outcome(s, inputs, |t, w| weighted_sum(&add(&t[0], &t[1])?, w))
        }),
    ));
    checks.push((
        "sub",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![2, 3, 4], rand_data(&mut r, 24)),
                (vec![2, 3, 4], rand_data(&mut r, 24)),
            ];
            outcome(s, inputs, |t, w| weighted_sum(&sub(&t[0], &t[1])?, w))
        }),
    ));
    checks.push((
        "mul",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![2, 3, 4], rand_data(&mut r, 24)),
                (vec![2, 3, 4], rand_data(&mut r, 24)),
            ];
            outcome(s, inputs, |t, w| weighted_sum(&mul(&t[0], &t[1])?, w))
        }),
    ));
    checks.push((
        "div",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![2, 3, 4], rand_data(&mut r, 24)),
                (vec![2, 3, 4], rand_away_from_zero(&mut r, 24)),
            ];
            outcome(s, inputs, |t, w| weighted_sum(&div(&t[0], &t[1])?, w))
        }),
    ));
    checks.push((
        "scale",
        Box::new(|s| {
            let mut r = seeded(s);
            let c = r.gen_range(-2.0..2.0);
            let inputs = vec![(vec![3, 4], rand_data(&mut r, 12))];
            outcome(s, inputs, move |t, w| weighted_sum(&scale(&t[0], c), w))
        }),
    ));
    checks.push((
        "add_scalar",
        Box::new(|s| {
            let mut r = seeded(s);
            let c = r.gen_range(-2.0..2.0);
            let inputs = vec![(vec![3, 4], rand_data(&mut r, 12))];
            outcome(s, inputs, move |t, w| weighted_sum(&add_scalar(&t[0], c), w))
        }),
    ));
    checks.push((
        "add_row",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![5, 4], rand_data(&mut r, 20)),
                (vec![4], rand_data(&mut r, 4)),
            ];
            outcome(s, inputs, |t, w| weighted_sum(&add_row(&t[0], &t[1])?, w))
        }),
    ));
    checks.push((
        "matmul",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![3, 4], rand_data(&mut r, 12)),
                (vec![4, 2], rand_data(&mut r, 8)),
            ];
            outcome(s, inputs, |t, w| weighted_sum(&matmul(&t[0], &t[1])?, w))
        }),
    ));
    checks.push((
        "transpose2d",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![(vec![3, 5], rand_data(&mut r, 15))];
            outcome(s, inputs, |t, w| weighted_sum(&transpose2d(&t[0])?, w))
        }),
    ));
    checks.push((
        "reshape",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![(vec![2, 6], rand_data(&mut r, 12))];
            outcome(s, inputs, |t, w| weighted_sum(&reshape(&t[0], &[3, 4])?, w))
        }),
    ));
    checks.push((
        "concat",
        Box::new(|s| {
            let mut r = seeded(s);
            let axis = (s % 3) as usize;
            let mut shapes = [vec![2, 3, 4], vec![2, 3, 4], vec![2, 3, 4]];
            shapes[1][axis] = 1;
            shapes[2][axis] = 2;
            let inputs: Vec<_> = shapes
                .iter()
                .map(|sh| {
                    let n = sh.iter().product();
                    (sh.clone(), rand_data(&mut r, n))
                })
                .collect();
            outcome(s, inputs, move |t, w| {
                weighted_sum(&concat(&[t[0].clone(), t[1].clone(), t[2].clone()], axis)?, w)
            })
        }),
    ));
    checks.push((
        "narrow",
        Box::new(|s| {
            let mut r = seeded(s);
            let axis = (s % 3) as usize;
            let inputs = vec![(vec![4, 5, 3], rand_data(&mut r, 60))];
            outcome(s, inputs, move |t, w| {
                let d = t[0].shape()[axis];
                let start = (s as usize / 3) % (d - 1);
                weighted_sum(&narrow(&t[0], axis, start, d - start - 1)?, w)
            })
        }),
    ));
    checks.push((
        "sum_all",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![(vec![3, 4], rand_data(&mut r, 12))];
            outcome(s, inputs, |t, w| weighted_sum(&sum_all(&t[0])?, w))
        }),
    ));
    checks.push((
        "sum_axis",
        Box::new(|s| {
            let mut r = seeded(s);
            let axis = (s % 3) as usize;
            let inputs = vec![(vec![3, 4, 2], rand_data(&mut r, 24))];
            outcome(s, inputs, move |t, w| weighted_sum(&sum_axis(&t[0], axis)?, w))
        }),
    ));
    checks.push((
        "softmax",
        Box::new(|s| {
            let mut r = seeded(s);
            let axis = (s % 2) as usize;
            let inputs = vec![(vec![4, 5], rand_data(&mut r, 20))];
            outcome(s, inputs, move |t, w| weighted_sum(&softmax(&t[0], axis)?, w))
        }),
    ));
    checks.push((
        "log_softmax",
        Box::new(|s| {
            let mut r = seeded(s);
            let axis = (s % 2) as usize;
            let inputs = vec![(vec![4, 5], rand_data(&mut r, 20))];
            outcome(s, inputs, move |t, w| {
                weighted_sum(&log_softmax(&t[0], axis)?, w)
            })
        }),
    ));
    checks.push((
        "gelu",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![(vec![2, 3, 4], rand_data(&mut r, 24))];
            outcome(s, inputs, |t, w| weighted_sum(&gelu(&t[0]), w))
        }),
    ));
    checks.push((
        "layernorm",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![6, 5], rand_data(&mut r, 30)),
                (vec![5], rand_data(&mut r, 5)),
                (vec![5], rand_data(&mut r, 5)),
            ];
            outcome(s, inputs, |t, w| {
                weighted_sum(&layernorm(&t[0], &t[1], &t[2])?, w)
            })
        }),
    ));
    checks.push((
        "conv2d",
        Box::new(|s| {
            let mut r = seeded(s);
            let stride = 1 + (s % 2) as usize;
            let pad = ((s / 2) % 2) as usize;
            let inputs = vec![
                (vec![2, 5, 5], rand_data(&mut r, 50)),
                (vec![3, 2, 3, 3], rand_data(&mut r, 54)),
            ];
            outcome(s, inputs, move |t, w| {
                weighted_sum(&conv2d(&t[0], &t[1], stride, pad)?, w)
            })
        }),
    ));
    checks.push((
        "depthwise_conv2d",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![
                (vec![4, 6, 6], rand_data(&mut r, 144)),
                (vec![4, 3, 3], rand_data(&mut r, 36)),
            ];
            outcome(s, inputs, |t, w| {
                weighted_sum(&depthwise_conv2d(&t[0], &t[1])?, w)
            })
        }),
    ));
    checks.push((
        "avgpool2x",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![(vec![3, 4, 4], rand_data(&mut r, 48))];
            outcome(s, inputs, |t, w| weighted_sum(&avgpool2x(&t[0])?, w))
        }),
    ));
    checks.push((
        "upsample2x",
        Box::new(|s| {
            let mut r = seeded(s);
            let inputs = vec![(vec![2, 3, 3], rand_data(&mut r, 18))];
            outcome(s, inputs, |t, w| weighted_sum(&upsample2x(&t[0])?, w))
        }),
    ));
    checks.push((
        "correlate",
        Box::new(|s| {
            let mut r = seeded(s);
            let d = 1 + (s % 2) as usize;
            let inputs = vec![(vec![4, 7, 7], rand_data(&mut r, 196))];
            outcome(s, inputs, move |t, w| weighted_sum(&correlate(&t[0], d)?, w))
        }),
    ));
    checks.push((
        "cross_entropy",
        Box::new(|s| {
            let mut r = seeded(s);
            let y: Vec<u8> = (0..9).map(|_| u8::from(r.gen_bool(0.4))).collect();
            let inputs = vec![(vec![2, 3, 3], rand_data(&mut r, 18))];
            outcome(s, inputs, move |t, _| cross_entropy(&t[0], &y))
        }),
    ));
    checks.push((
        "soft_dice",
        Box::new(|s| {
            let mut r = seeded(s);
            let y: Vec<u8> = (0..9).map(|_| u8::from(r.gen_bool(0.4))).collect();
            let inputs = vec![(vec![2, 3, 3], rand_data(&mut r, 18))];
            outcome(s, inputs, move |t, _| {
                soft_dice(&softmax(&t[0], 0)?, &onehot(&y, 3, 3)?, DICE_EPSILON)
            })
        }),
    ));
    checks.push((
        "total_loss",
        Box::new(|s| {
            let mut r = seeded(s);
            let y: Vec<u8> = (0..9).map(|_| u8::from(r.gen_bool(0.4))).collect();
            let inputs = vec![(vec![2, 3, 3], rand_data(&mut r, 18))];
            outcome(s, inputs, move |t, _| {
                total_loss(&t[0], &y, &LossWeights::default())
            })
        }),
    ));
    checks
}

pub const MODEL_TOL: f64 = 1e-2;

/// Central finite differences through the entire tiny model: perturbs a
/// random sample of coordinates in every parameter tensor and compares
/// against backward's analytic gradients of the training loss.
pub fn model_fd_spot_check(seed: u64, coords_per_param: usize) -> Result<FdOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RtdModel::<f64>::new(ModelConfig::check8(), &mut rng)?;
    let s = model.config.s;
    let n = 3 * s * s;
    let goal = Tensor::from_vec(&[3, s, s], rand_data(&mut rng, n).iter().map(|v| v.abs()).collect())?;
    let cur = Tensor::from_vec(&[3, s, s], rand_data(&mut rng, n).iter().map(|v| v.abs()).collect())?;
    let y: Vec<u8> = (0..s * s).map(|_| u8::from(rng.gen_bool(0.4))).collect();
    let w = LossWeights::default();

    let loss = total_loss(&model.forward(&goal, &cur)?, &y, &w)?;
    loss.backward()?;
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit("", &mut |name, t| grads.push((name.to_string(), t.grad_or_zeros())));

    let eval = |model: &RtdModel<f64>| -> Result<f64> {
        let _guard = NoGradGuard::new();
        Ok(total_loss(&model.forward(&goal, &cur)?, &y, &w)?.item())
    };
    let set_coord = |model: &mut RtdModel<f64>, name: &str, j: usize, v: f64| {
        model.visit_mut("", &mut |n, t| {
            if n == name {
                let mut d = t.data().to_vec();
                d[j] = v;
                *t = Tensor::leaf(&t.shape().to_vec(), d).expect("shape unchanged");
            }
        });
    };

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (name, grad) in &grads {
        for _ in 0..coords_per_param {
            let j = rng.gen_range(0..grad.len());
            let mut orig = f64::NAN;
            model.visit("", &mut |n, t| {
                if n == *name {
                    orig = t.data()[j];
                }
            });
            set_coord(&mut model, name, j, orig + FD_STEP);
            let lp = eval(&model)?;
            set_coord(&mut model, name, j, orig - FD_STEP);
            let lm = eval(&model)?;
            set_coord(&mut model, name, j, orig);
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let rel = (fd - grad[j]).abs() / grad[j].abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdOutcome { max_rel_err: max_rel, coords_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_flags_a_wrong_gradient() {
        // mul with mul-like forward but add backward: huge rel err expected
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![(vec![4], vec![0.5, -1.0, 2.0, 3.0])];
        let out = fd_scalar_loss(
            &inputs,
            |t| {
                let data: Vec<f64> = t[0].data().iter().map(|&v| v * v * v).collect();
                let y = Tensor::from_op(
                    vec![4],
                    data,
                    vec![t[0].clone()],
                    Box::new(|_, g, parents| {
                        parents[0].accum_grad(|ga| {
                            for i in 0..ga.len() {
                                ga[i] += g[i]; // wrong on purpose
                            }
                        });
                    }),
                );
                sum_all(&y)
            },
            16,
            &mut rng,
        )
        .unwrap();
        assert!(out.max_rel_err > 0.1, "rel err {}", out.max_rel_err);
    }
}

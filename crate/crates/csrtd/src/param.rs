//! Weight initialization and uniform traversal of a model's parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normal(0, std) resampled until |z| <= 2 std.
pub fn trunc_normal<E: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = dist.sample(rng);
            if z.abs() <= 2.0 * std {
                break E::c(z);
            }
        })
        .collect();
    Tensor::leaf(shape, data).expect("shape/data agree")
}

/// Uniform(-b, b) with b = 1/sqrt(fan_in).
pub fn uniform_fan_in<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let b = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::c(rng.gen_range(-b..b))).collect();
    Tensor::leaf(shape, data).expect("shape/data agree")
}

pub fn zeros_param<E: Scalar>(shape: &[usize]) -> Tensor<E> {
    Tensor::leaf(shape, vec![E::zero(); shape.iter().product()]).expect("shape/data agree")
}

pub fn ones_param<E: Scalar>(shape: &[usize]) -> Tensor<E> {
    Tensor::leaf(shape, vec![E::one(); shape.iter().product()]).expect("shape/data agree")
}

/// Deterministic named traversal of every trainable tensor. The visit order
/// defines the canonical parameter order used by the optimizer and the
/// checkpoint format.
pub trait ParamVisit<E: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>));
}

pub fn collect_params<E: Scalar, M: ParamVisit<E>>(m: &M) -> Vec<(String, Tensor<E>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn count_params<E: Scalar, M: ParamVisit<E>>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.numel());
    n
}

pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_stays_inside_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t: Tensor<f64> = trunc_normal(&[64, 64], 0.02, &mut rng);
        for &v in t.data().iter() {
            assert!(v.abs() <= 0.04 + 1e-12);
        }
        let mean: f64 = t.data().iter().sum::<f64>() / 4096.0;
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = uniform_fan_in(&[8, 4, 3, 3], 4 * 9, &mut rng);
        let b = 1.0 / 6.0;
        for &v in t.data().iter() {
            assert!(v > -b && v < b);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let ta: Tensor<f32> = trunc_normal(&[3, 5], 0.02, &mut a);
        let tb: Tensor<f32> = trunc_normal(&[3, 5], 0.02, &mut b);
        assert_eq!(ta.data().to_vec(), tb.data().to_vec());
    }
}

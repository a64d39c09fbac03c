#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saccader::model::{init_model, ModelConfig};
use saccader::params::ParameterSet;
use saccader::Tensor;

/// 23x23 images, 15-pixel patches at stride 8: a 2x2 grid.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 23,
        channels: 1,
        rf: 15,
        stride: 8,
        enc1: 3,
        enc2: 3,
        d_repr: 4,
        d_what: 3,
        where_hidden: 3,
        d_where: 3,
        d_mix: 3,
        num_classes: 3,
    }
}

/// 31x31 images: a 3x3 grid.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 31,
        enc1: 4,
        enc2: 4,
        d_repr: 6,
        d_what: 4,
        where_hidden: 4,
        d_where: 4,
        d_mix: 4,
        num_classes: 4,
        ..tiny_config()
    }
}

/// Model weights in 64-bit with randomized batch-norm parameters so the
/// infer path is not the identity.
pub fn model_f64(cfg: &ModelConfig, seed: u64) -> ParameterSet<f64> {
    let mut p = init_model(cfg, seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B);
    let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = p.get_mut(&n).unwrap();
        if n.ends_with("running_var") || n.ends_with(".scale") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if n.ends_with("running_mean") || n.ends_with(".shift") || n.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    p
}

pub fn images(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, cfg.image_size, cfg.image_size, cfg.channels], |_| rng.random_range(0.0..1.0))
}

pub fn image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let s = cfg.image_size;
    images(cfg, 1, seed).reshape(&[s, s, cfg.channels]).unwrap()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

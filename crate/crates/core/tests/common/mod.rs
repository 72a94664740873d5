#![allow(dead_code)]

use diffcore::{ModelParams, Tensor};
use mmsbr::config::{HyperParams, Precision, Variant};
use mmsbr::model::init_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Small f64 model, as used by the gradient check.
pub fn small_hyper(d: usize) -> HyperParams {
    HyperParams {
        d,
        heads: 2,
        batch: 4,
        r_layers: 2,
        c_features: 2,
        t_pivot: 2,
        precision: Precision::F64,
        ..HyperParams::default()
    }
}

pub fn params(h: &HyperParams, variant: Variant, seed: u64) -> ModelParams<f64> {
    init_params(h, variant, 3, seed).unwrap()
}

/// Replaces every tensor whose path starts with `prefix` by a random one.
pub fn randomize(p: &mut ModelParams<f64>, prefix: &str, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in p.iter_mut() {
        if name.starts_with(prefix) {
            *t = random(&mut r, &t.shape().to_vec());
        }
    }
}

pub fn zero(p: &mut ModelParams<f64>, prefix: &str) {
    for (name, t) in p.iter_mut() {
        if name.starts_with(prefix) {
            *t = Tensor::zeros(&t.shape().to_vec());
        }
    }
}

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use simtpr_core::config::ExperimentConfig;
use simtpr_core::model::ModelBundle;
use simtpr_core::{Precision, Tensor};

pub const TINY_FRAME: [usize; 3] = [1, 6, 6];
pub const TINY_ACTIONS: usize = 3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Random tensor whose last-axis rows have unit norm.
pub fn unit_rows(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let d = *shape.last().unwrap();
    let mut t = normal(shape, rng);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// d = 4, N = 2, T = 3 on 1×6×6 frames, 64-bit.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.batch.n = 2;
    c.batch.t = 3;
    c.model.d = 4;
    c.model.heads = 2;
    c.model.layers = 1;
    c.model.mlp_hidden = 8;
    c.model.proj_hidden = 8;
    c.model.pred_hidden = 8;
    c.model.action_hidden = 8;
    c.model.encoder_channels = vec![2, 2];
    c.model.max_positions = 8;
    c.precision = Precision::F64;
    c
}

pub fn tiny_bundle(cfg: &ExperimentConfig) -> ModelBundle {
    ModelBundle::from_config(cfg, TINY_FRAME, TINY_ACTIONS).unwrap()
}

/// Random `[N, T, 1, 6, 6]` pixels in `[0, 1)`.
pub fn tiny_views(n: usize, t: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let shape = [n, t, 1, 6, 6];
    (Tensor::from_fn(&shape, |_| rng.random()), Tensor::from_fn(&shape, |_| rng.random()))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

//! Shared fixtures for the criterion benches.

use meshloop::numerics::Dtype;
use meshloop::{LayerPlan, Model, ModelConfig, Rng, SchemeSpec, Tensor};

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    rng.normal_tensor(&[rows, cols], 1.0)
}

/// A desk-scale f32 model with the given scheme.
pub fn model(plan: &str, scheme: SchemeSpec, d: usize, seq: usize) -> Model<f32> {
    let cfg = ModelConfig {
        d_model: d,
        n_heads: 4,
        d_ff: 4 * d,
        vocab: 96,
        max_seq: seq,
        plan: plan.parse::<LayerPlan>().expect("bench plan"),
        scheme,
        dtype: Dtype::F32,
        seed: 0,
    };
    Model::init(cfg).expect("bench model")
}

pub fn tokens(rng: &mut Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(96)).collect()
}

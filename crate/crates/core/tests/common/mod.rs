#![allow(dead_code)]

use meshloop::numerics::Dtype;
use meshloop::{LayerPlan, Model, ModelConfig, Rng, SchemeKind, SchemeSpec, Tensor};

pub fn config(plan: &str, scheme: SchemeSpec, d: usize, heads: usize, vocab: usize, seq: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: heads,
        d_ff: 4 * d,
        vocab,
        max_seq: seq,
        plan: plan.parse::<LayerPlan>().unwrap(),
        scheme,
        dtype: Dtype::F64,
        seed: 7,
    }
}

/// Every scheme variant, with vanilla+mesh last.
pub fn all_schemes() -> Vec<(&'static str, SchemeSpec)> {
    vec![
        ("base", SchemeSpec::new(SchemeKind::Base)),
        ("residual", SchemeSpec::new(SchemeKind::Residual)),
        ("anchor", SchemeSpec::new(SchemeKind::Anchor)),
        ("anchor*", SchemeSpec::new(SchemeKind::AnchorStar)),
        ("static", SchemeSpec::new(SchemeKind::StaticComb)),
        ("dynamic", SchemeSpec::new(SchemeKind::DynamicComb)),
        ("mesh", SchemeSpec::mesh(5)),
        ("vanilla+mesh", SchemeSpec::vanilla_mesh(5)),
    ]
}

pub fn tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

/// Zeroes attention and MLP output projections so every block is the
/// identity map.
pub fn zero_out_projections(model: &mut Model<f64>) {
    let names: Vec<String> = model
        .params
        .names()
        .iter()
        .filter(|n| {
            ["attn.wo", "attn.bo", "mlp.w2", "mlp.b2"]
                .iter()
                .any(|s| n.ends_with(s))
        })
        .cloned()
        .collect();
    for n in names {
        let t = model.params.get_mut(&n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
}

/// Randomizes every parameter with the given scale so that biases, gains
/// and routers are away from their structured initial values.
pub fn perturb_all(model: &mut Model<f64>, rng: &mut Rng, scale: f64) {
    for t in model.params.tensors_mut() {
        let noise: Tensor<f64> = rng.normal_tensor(t.shape(), scale);
        t.add_assign(&noise).unwrap();
    }
}

pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.sub(b).unwrap();
    meshloop::numerics::frobenius(&diff) / meshloop::numerics::frobenius(b)
}

//! Quick oracle checks: pinned routers against fixed recurrences, unroll
//! identities, and gradient checks on a tiny model of every scheme.

use std::process::ExitCode;

use anyhow::Result;
use meshloop::mesh::{
    default_buffer_len, full_unroll, mesh_read, mesh_run, mesh_write, pin_simulation, route, unroll_step,
    MeshBuffer, PinGeometry, PinTarget, Router, RouterSet,
};
use meshloop::numerics::{frobenius, grad_check, ops};
use meshloop::{Dtype, LayerPlan, Model, ModelConfig, Rng, SchemeKind, SchemeSpec, Tensor};

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(frobenius(&a.sub(b)?) / frobenius(b).max(f64::MIN_POSITIVE))
}

fn tiny(plan: &str, scheme: SchemeSpec, d: usize, seq: usize) -> Result<ModelConfig> {
    Ok(ModelConfig {
        d_model: d,
        n_heads: 2,
        d_ff: 4 * d,
        vocab: 11,
        max_seq: seq,
        plan: plan.parse::<LayerPlan>()?,
        scheme,
        dtype: Dtype::F64,
        seed: 3,
    })
}

fn perturbed(cfg: ModelConfig, rng: &mut Rng) -> Result<Model<f64>> {
    let mut m = Model::<f64>::init(cfg)?;
    for t in m.params.tensors_mut() {
        let noise: Tensor<f64> = rng.normal_tensor(t.shape(), 0.05);
        t.add_assign(&noise)?;
    }
    Ok(m)
}

/// Mesh model with pinned routers against the matching recurrence model
/// sharing all other weights. Compares logits.
fn pinned_vs_recurrence(target: PinTarget, kind: SchemeKind, k: usize) -> Result<f64> {
    let plan = format!("1+1R{k}+1");
    let (d, l) = (16, 8);
    let slots = default_buffer_len(k);
    let mut rng = Rng::new(21);
    let mut mesh = perturbed(tiny(&plan, SchemeSpec::mesh(slots), d, l)?, &mut rng)?;
    let mut fixed = Model::<f64>::init(tiny(&plan, SchemeSpec::new(kind), d, l)?)?;
    let names: Vec<String> = fixed.params.names().to_vec();
    for n in names {
        if let (Some(dst), Some(src)) = (fixed.params.get_mut(&n), mesh.params.get(&n)) {
            *dst = src.clone();
        }
    }
    mesh.install_routers(&pin_simulation(target, PinGeometry { d_model: d, n_loop: k, slots })?)?;
    let toks: Vec<usize> = (0..l).map(|_| rng.below(11)).collect();
    rel(&mesh.forward(&toks)?.logits, &fixed.forward(&toks)?.logits)
}

fn stochastic(rng: &mut Rng, l: usize, b: usize) -> Result<Tensor<f64>> {
    let r = Router {
        weight: rng.normal_tensor(&[3, b], 1.5),
        bias: rng.normal_tensor(&[b], 1.0),
    };
    let x: Tensor<f64> = rng.normal_tensor(&[l, 3], 1.0);
    Ok(route(&r, &x)?)
}

fn unroll_errors() -> Result<(f64, f64)> {
    let mut rng = Rng::new(22);
    let mut step_err = 0.0f64;
    for _ in 0..200 {
        let (l, d, b) = (1 + rng.below(6), 1 + rng.below(6), 2 + rng.below(5));
        let buf = MeshBuffer::from_slots((0..b).map(|_| rng.normal_tensor(&[l, d], 1.0)).collect())?;
        let h_m: Tensor<f64> = rng.normal_tensor(&[l, d], 1.0);
        let ww = stochastic(&mut rng, l, b)?;
        let wr = stochastic(&mut rng, l, b)?;
        let direct = mesh_read(&mesh_write(&buf, &h_m, &ww)?, &wr)?;
        step_err = step_err.max(unroll_step(&buf, &h_m, &ww, &wr)?.reconstruction.max_abs_diff(&direct));
    }
    let mut full_err = 0.0f64;
    for k in 1..=4 {
        let (l, d, b) = (5, 4, 6);
        let emb: Tensor<f64> = rng.normal_tensor(&[l, d], 1.0);
        let mut routers = RouterSet::random(&mut rng, d, b, k);
        for t in -1..k as isize {
            let s = routers.step_mut(t);
            s.write.weight = rng.normal_tensor(&[d, b], 1.0);
            s.read.weight = rng.normal_tensor(&[d, b], 1.0);
        }
        let w: Tensor<f64> = rng.normal_tensor(&[d, d], 0.7);
        let run = mesh_run(
            &emb,
            |h| Ok(h.map(f64::tanh)),
            |_, h| ops::matmul(h, &w).map(|z| ops::gelu(&z)),
            k,
            &routers,
            b,
        )?;
        for c in full_unroll(&run)? {
            full_err = full_err.max(rel(&c.reconstruct(&run)?, &run.states[c.state])?);
        }
    }
    Ok((step_err, full_err))
}

fn grad_errors() -> Result<Vec<(&'static str, f64)>> {
    let schemes = [
        ("base", SchemeSpec::new(SchemeKind::Base)),
        ("residual", SchemeSpec::new(SchemeKind::Residual)),
        ("anchor", SchemeSpec::new(SchemeKind::Anchor)),
        ("anchor*", SchemeSpec::new(SchemeKind::AnchorStar)),
        ("static", SchemeSpec::new(SchemeKind::StaticComb)),
        ("dynamic", SchemeSpec::new(SchemeKind::DynamicComb)),
        ("mesh", SchemeSpec::mesh(4)),
        ("vanilla+mesh", SchemeSpec::vanilla_mesh(4)),
    ];
    let mut out = Vec::new();
    for (i, (name, scheme)) in schemes.into_iter().enumerate() {
        let mut rng = Rng::new(30 + i as u64);
        let model = perturbed(tiny("1+1R2+1", scheme, 8, 5)?, &mut rng)?;
        let toks: Vec<usize> = (0..5).map(|_| rng.below(11)).collect();
        let targets: Vec<usize> = (0..5).map(|_| rng.below(11)).collect();
        let params: Vec<Tensor<f64>> = model.params.tensors().to_vec();
        let r = grad_check(&params, 1e-6, |g, p| {
            let (logits, _) = model.build(g, p, &toks)?;
            g.cross_entropy(logits, &targets)
        })?;
        out.push((name, r.max_rel_error));
    }
    Ok(out)
}

pub fn run() -> Result<ExitCode> {
    let mut failed = 0;
    let mut report = |name: &str, value: f64, tol: f64| {
        let ok = value <= tol;
        failed += usize::from(!ok);
        println!("{} {name}: {value:.3e} (tol {tol:.0e})", if ok { "PASS" } else { "FAIL" });
    };
    report("pin base K=3", pinned_vs_recurrence(PinTarget::Base, SchemeKind::Base, 3)?, 1e-10);
    report("pin residual K=3", pinned_vs_recurrence(PinTarget::Residual, SchemeKind::Residual, 3)?, 1e-10);
    report("pin anchor K=1", pinned_vs_recurrence(PinTarget::Anchor, SchemeKind::Anchor, 1)?, 1e-10);
    report("pin anchor* K=1", pinned_vs_recurrence(PinTarget::AnchorStar, SchemeKind::AnchorStar, 1)?, 1e-10);
    let (step_err, full_err) = unroll_errors()?;
    report("unroll step identity", step_err, 1e-14);
    report("full unroll identity", full_err, 1e-10);
    for (name, err) in grad_errors()? {
        report(&format!("grad check {name}"), err, 1e-4);
    }
    if failed > 0 {
        println!("{failed} checks failed");
        return Ok(ExitCode::from(1));
    }
    println!("all checks passed");
    Ok(ExitCode::SUCCESS)
}

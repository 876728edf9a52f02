use meshloop::numerics::grad_check;
use meshloop::recurrence::{comb_step, combine, loop_step, run_loop, CombParams, StepRule};
use meshloop::{Graph, Result, Rng, SchemeKind, Tensor, Var};

const L: usize = 5;
const D: usize = 6;

struct Setup {
    g: Graph<f64>,
    h0: Var,
    emb: Var,
    w: Var,
}

fn setup(seed: u64) -> Setup {
    let mut rng = Rng::new(seed);
    let mut g = Graph::inference();
    let h0 = g.constant(rng.normal_tensor(&[L, D], 1.0));
    let emb = g.constant(rng.normal_tensor(&[L, D], 1.0));
    let w = g.constant(rng.normal_tensor(&[D, D], 0.3));
    Setup { g, h0, emb, w }
}

fn tiny_core(w: Var) -> impl FnMut(&mut Graph<f64>, Var) -> Result<Var> {
    move |g, h| {
        let z = g.matmul(h, w)?;
        Ok(g.gelu(z))
    }
}

fn identity(_: &mut Graph<f64>, h: Var) -> Result<Var> {
    Ok(h)
}

fn val(g: &Graph<f64>, v: Var) -> Tensor<f64> {
    g.value(v).clone()
}

#[test]
fn fixed_rules_with_identity_core() {
    let mut s = setup(1);
    let h = val(&s.g, s.h0);
    let (_, base) = loop_step(&mut s.g, SchemeKind::Base, s.h0, s.h0, s.emb, &mut identity).unwrap();
    assert_eq!(val(&s.g, base), h);
    let (_, res) = loop_step(&mut s.g, SchemeKind::Residual, s.h0, s.h0, s.emb, &mut identity).unwrap();
    assert_eq!(val(&s.g, res), h.scale(2.0));
}

#[test]
fn anchor_supplement_is_h0() {
    let mut s = setup(2);
    let mut core = tiny_core(s.w);
    let h1 = s.g.constant(Rng::new(9).normal_tensor(&[L, D], 1.0));
    let (out, next) = loop_step(&mut s.g, SchemeKind::Anchor, h1, s.h0, s.emb, &mut core).unwrap();
    let diff = val(&s.g, next).sub(&val(&s.g, out)).unwrap();
    assert!(diff.max_abs_diff(&val(&s.g, s.h0)) <= 1e-14);
    let (out, next) = loop_step(&mut s.g, SchemeKind::AnchorStar, h1, s.h0, s.emb, &mut core).unwrap();
    let diff = val(&s.g, next).sub(&val(&s.g, out)).unwrap();
    assert!(diff.max_abs_diff(&val(&s.g, s.emb)) <= 1e-14);
    assert!(loop_step(&mut s.g, SchemeKind::Mesh, h1, s.h0, s.emb, &mut core).is_err());
}

fn static_alpha(g: &mut Graph<f64>, a: [f64; 3]) -> CombParams {
    CombParams::Static {
        alpha: g.constant(Tensor::from_f64(&[3], &a).unwrap()),
    }
}

#[test]
fn pinned_static_coefficients_reproduce_fixed_rules() {
    let mut s = setup(3);
    let mut core = tiny_core(s.w);
    let h = s.g.constant(Rng::new(10).normal_tensor(&[L, D], 1.0));
    let cases = [
        ([1.0, 0.0, 0.0], SchemeKind::Base),
        ([1.0, 1.0, 0.0], SchemeKind::Anchor),
        ([1.0, 0.0, 1.0], SchemeKind::AnchorStar),
    ];
    for (a, kind) in cases {
        let p = static_alpha(&mut s.g, a);
        let (_, c) = comb_step(&mut s.g, &p, h, s.h0, s.emb, &mut core).unwrap();
        let (_, f) = loop_step(&mut s.g, kind, h, s.h0, s.emb, &mut core).unwrap();
        assert!(val(&s.g, c).max_abs_diff(&val(&s.g, f)) <= 1e-12, "{kind}");
    }
    let p = static_alpha(&mut s.g, [1.0, 0.0, 0.0]);
    let (_, c) = comb_step(&mut s.g, &p, h, s.h0, s.emb, &mut core).unwrap();
    let (_, f) = loop_step(&mut s.g, SchemeKind::Base, h, s.h0, s.emb, &mut core).unwrap();
    assert_eq!(val(&s.g, c), val(&s.g, f));

    // Residual: the h(0) slot of the combination replaced by h(t).
    let alpha = s.g.constant(Tensor::from_f64(&[3], &[1.0, 1.0, 0.0]).unwrap());
    let out = core(&mut s.g, h).unwrap();
    let c = combine(&mut s.g, alpha, [out, h, s.emb]).unwrap();
    let (_, f) = loop_step(&mut s.g, SchemeKind::Residual, h, s.h0, s.emb, &mut core).unwrap();
    assert!(val(&s.g, c).max_abs_diff(&val(&s.g, f)) <= 1e-12);
}

#[test]
fn dynamic_head_with_zero_weights_reproduces_anchor_star() {
    let mut s = setup(4);
    let mut core = tiny_core(s.w);
    let p = CombParams::Dynamic {
        weight: s.g.constant(Tensor::zeros(&[D, 3])),
        bias: s.g.constant(Tensor::from_f64(&[3], &[1.0, 0.0, 1.0]).unwrap()),
    };
    let (_, c) = comb_step(&mut s.g, &p, s.h0, s.h0, s.emb, &mut core).unwrap();
    let (_, f) = loop_step(&mut s.g, SchemeKind::AnchorStar, s.h0, s.h0, s.emb, &mut core).unwrap();
    assert!(val(&s.g, c).max_abs_diff(&val(&s.g, f)) <= 1e-12);
}

#[test]
fn dynamic_coefficients_are_causal() {
    let mut rng = Rng::new(5);
    let mut g = Graph::<f64>::inference();
    let w = g.constant(rng.normal_tensor(&[D, 3], 1.0));
    let b = g.constant(Tensor::from_f64(&[3], &[1.0, 0.0, 0.0]).unwrap());
    let p = CombParams::Dynamic { weight: w, bias: b };
    let x = rng.normal_tensor(&[L, D], 1.0);
    let mut y = x.clone();
    y.data_mut()[(L - 1) * D] += 5.0;
    let xv = g.constant(x);
    let yv = g.constant(y);
    let cx = p.coefficients(&mut g, xv).unwrap();
    let cy = p.coefficients(&mut g, yv).unwrap();
    for i in 0..L - 1 {
        assert_eq!(g.value(cx).row(i), g.value(cy).row(i));
    }
    assert_ne!(g.value(cx).row(L - 1), g.value(cy).row(L - 1));
}

#[test]
fn run_loop_composition_and_trace() {
    let mut s = setup(6);
    let w = s.w;
    let mut core = |g: &mut Graph<f64>, _t: usize, h: Var| tiny_core(w)(g, h);
    let run = run_loop(&mut s.g, &StepRule::Base, s.h0, s.emb, 3, &mut core).unwrap();
    assert_eq!(run.states.len(), 3);
    let mut c = tiny_core(w);
    let a = c(&mut s.g, s.h0).unwrap();
    let b = c(&mut s.g, a).unwrap();
    let z = c(&mut s.g, b).unwrap();
    assert_eq!(val(&s.g, run.last()), val(&s.g, z));

    let one = run_loop(&mut s.g, &StepRule::Anchor, s.h0, s.emb, 1, &mut core).unwrap();
    let (_, step) = loop_step(&mut s.g, SchemeKind::Anchor, s.h0, s.h0, s.emb, &mut c).unwrap();
    assert_eq!(val(&s.g, one.last()), val(&s.g, step));
    assert!(run_loop(&mut s.g, &StepRule::Base, s.h0, s.emb, 0, &mut core).is_err());
}

#[test]
fn supplements_accumulate_over_identity_core() {
    let mut s = setup(7);
    let k = 3;
    let mut core = |_: &mut Graph<f64>, _t: usize, h: Var| Ok(h);
    let h0 = val(&s.g, s.h0);
    let emb = val(&s.g, s.emb);
    let mut run = |rule: StepRule| {
        let r = run_loop(&mut s.g, &rule, s.h0, s.emb, k, &mut core).unwrap();
        val(&s.g, r.last())
    };
    let base = run(StepRule::Base);
    assert_eq!(base, h0);
    let res = run(StepRule::Residual).sub(&base).unwrap();
    assert!(res.max_abs_diff(&h0.scale(7.0)) < 1e-12);
    let anc = run(StepRule::Anchor).sub(&base).unwrap();
    assert!(anc.max_abs_diff(&h0.scale(k as f64)) < 1e-12);
    let star = run(StepRule::AnchorStar).sub(&base).unwrap();
    assert!(star.max_abs_diff(&emb.scale(k as f64)) < 1e-12);
}

#[test]
fn gradients_reach_combination_parameters() {
    let mut rng = Rng::new(8);
    let params = vec![
        rng.normal_tensor(&[L, D], 1.0),
        rng.normal_tensor(&[L, D], 1.0),
        rng.normal_tensor(&[D, D], 0.3),
        Tensor::from_f64(&[3], &[0.9, 0.2, -0.1]).unwrap(),
        rng.normal_tensor(&[D, 3], 0.3),
        Tensor::from_f64(&[3], &[1.0, 0.1, 0.3]).unwrap(),
    ];
    for dynamic in [false, true] {
        let r = grad_check(&params, 1e-6, |g, v| {
            let p = if dynamic {
                CombParams::Dynamic { weight: v[4], bias: v[5] }
            } else {
                CombParams::Static { alpha: v[3] }
            };
            let w = v[2];
            let mut core = |g: &mut Graph<f64>, _t: usize, h: Var| tiny_core(w)(g, h);
            let run = run_loop(g, &StepRule::Comb(p), v[0], v[1], 2, &mut core)?;
            let sq = g.mul(run.last(), run.last())?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "dynamic={dynamic}: {r:?}");
    }
}

#[test]
fn scheme_names_round_trip() {
    for k in SchemeKind::ALL {
        assert_eq!(k.as_str().parse::<SchemeKind>().unwrap(), k);
    }
    assert!("anchor*".parse::<SchemeKind>().is_err());
}

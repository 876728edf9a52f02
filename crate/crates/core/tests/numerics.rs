use meshloop::numerics::ops;
use meshloop::numerics::linalg::symmetric_eigenvalues;
use meshloop::{Graph, Rng, Tensor};
use meshloop::numerics::{grad_check, singular_values};
use proptest::prelude::*;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(1);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 16)] {
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let got = ops::matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let nt = ops::matmul_nt(&a, &b.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&got) < 1e-12);
        let tn = ops::matmul_tn(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&got) < 1e-12);
    }
}

#[test]
fn matmul_rejects_bad_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    assert!(ops::matmul(&a, &a).is_err());
}

#[test]
fn softmax_rows_are_stochastic_and_shift_invariant() {
    let mut rng = Rng::new(2);
    let x = rand_t(&mut rng, &[6, 5]).scale(30.0);
    let p = ops::softmax_rows(&x).unwrap();
    for i in 0..6 {
        let s: f64 = p.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.row(i).iter().all(|&v| v >= 0.0));
    }
    let shifted = ops::softmax_rows(&x.map(|v| v + 1000.0)).unwrap();
    assert!(shifted.max_abs_diff(&p) < 1e-12);
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut rng = Rng::new(3);
    let x = rand_t(&mut rng, &[4, 8]).map(|v| 3.0 * v + 2.0);
    let g = Tensor::full(&[8], 1.0);
    let b = Tensor::zeros(&[8]);
    let (y, _) = ops::layer_norm(&x, &g, &b).unwrap();
    for i in 0..4 {
        let row = y.row(i);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn rope_is_an_isometry_inverted_by_its_inverse() {
    let mut rng = Rng::new(4);
    let x = rand_t(&mut rng, &[9, 8]);
    let r = ops::rope(&x, 2, false).unwrap();
    for i in 0..9 {
        let a: f64 = x.row(i).iter().map(|v| v * v).sum();
        let b: f64 = r.row(i).iter().map(|v| v * v).sum();
        assert!((a - b).abs() < 1e-10);
    }
    assert_eq!(r.row(0), x.row(0));
    let back = ops::rope(&r, 2, true).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-12);
}

#[test]
fn rope_scores_depend_only_on_offset() {
    // <R_m q, R_n k> is a function of m - n.
    let mut rng = Rng::new(5);
    let q = rand_t(&mut rng, &[1, 4]);
    let k = rand_t(&mut rng, &[1, 4]);
    let place = |v: &Tensor<f64>, pos: usize| {
        let mut data = vec![0.0; 12 * 4];
        data[pos * 4..pos * 4 + 4].copy_from_slice(v.data());
        let r = ops::rope(&Tensor::new(&[12, 4], data).unwrap(), 1, false).unwrap();
        r.row(pos).to_vec()
    };
    let score = |m: usize, n: usize| -> f64 {
        place(&q, m).iter().zip(place(&k, n)).map(|(a, b)| a * b).sum()
    };
    assert!((score(5, 2) - score(10, 7)).abs() < 1e-10);
}

#[test]
fn attention_matches_scalar_loop() {
    let mut rng = Rng::new(6);
    let (l, d, heads) = (5, 6, 2);
    let q = rand_t(&mut rng, &[l, d]);
    let k = rand_t(&mut rng, &[l, d]);
    let v = rand_t(&mut rng, &[l, d]);
    let (out, _) = ops::causal_attention(&q, &k, &v, heads).unwrap();
    let hd = d / heads;
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..hd).map(|c| q.at(i, h * hd + c) * k.at(j, h * hd + c)).sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..hd {
                let want: f64 = (0..=i).map(|j| scores[j].exp() / z * v.at(j, h * hd + c)).sum();
                assert!((out.at(i, h * hd + c) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_vocab() {
    let logits = Tensor::<f64>::zeros(&[3, 7]);
    let (loss, _) = ops::cross_entropy(&logits, &[0, 3, 6]).unwrap();
    assert!((loss - 7f64.ln()).abs() < 1e-14);
    assert!(ops::cross_entropy(&logits, &[0, 3, 7]).is_err());
}

#[test]
fn gelu_derivative_matches_finite_difference() {
    for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
        let h = 1e-6;
        let num = (ops::gelu_scalar(x + h) - ops::gelu_scalar(x - h)) / (2.0 * h);
        assert!((ops::gelu_grad_scalar(x) - num).abs() < 1e-8);
    }
}

fn check(params: Vec<Tensor<f64>>, program: impl Fn(&mut Graph<f64>, &[meshloop::Var]) -> meshloop::Result<meshloop::Var> + Sync) {
    let r = grad_check(&params, 1e-6, program).unwrap();
    assert!(r.max_rel_error < 1e-6, "grad check error {:?}", r);
}

#[test]
fn grad_check_elementwise_and_matmul_ops() {
    let mut rng = Rng::new(7);
    let ps = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2]), rand_t(&mut rng, &[3, 4])];
    check(ps, |g, v| {
        let a = g.matmul(v[0], v[1])?;
        let b = g.mul(v[0], v[2])?;
        let c = g.sub(b, v[2])?;
        let c = g.scale(c, 0.5);
        let d = g.matmul_nt(c, v[0])?;
        let e = g.sum(a);
        let f = g.sum(d);
        let s = g.add(e, f)?;
        let s2 = g.mul(s, s)?;
        Ok(g.sum(s2))
    });
}

#[test]
fn grad_check_normalization_and_activation_ops() {
    let mut rng = Rng::new(8);
    let ps = vec![
        rand_t(&mut rng, &[4, 6]),
        rand_t(&mut rng, &[6]),
        rand_t(&mut rng, &[6]),
        rand_t(&mut rng, &[6, 6]),
    ];
    check(ps, |g, v| {
        let x = g.layer_norm(v[0], v[1], v[2])?;
        let x = g.gelu(x);
        let x = g.linear(x, v[3], v[1])?;
        let x = g.softmax_rows(x)?;
        let w = g.mean_rows(x)?;
        let y = g.matmul_nt(w, v[0])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    });
}

#[test]
fn grad_check_attention_rope_and_loss() {
    let mut rng = Rng::new(9);
    let ps = vec![
        rand_t(&mut rng, &[5, 8]),
        rand_t(&mut rng, &[5, 8]),
        rand_t(&mut rng, &[5, 8]),
        rand_t(&mut rng, &[7, 8]),
    ];
    check(ps, |g, v| {
        let q = g.rope(v[0], 2)?;
        let k = g.rope(v[1], 2)?;
        let o = g.causal_attention(q, k, v[2], 2)?;
        let e = g.embedding(v[3], &[1, 0, 6, 6, 2])?;
        let h = g.add(o, e)?;
        let logits = g.matmul_nt(h, v[3])?;
        g.cross_entropy(logits, &[0, 2, 4, 6, 1])
    });
}

#[test]
fn grad_check_routing_ops() {
    let mut rng = Rng::new(10);
    let ps = vec![rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[4, 5]), rand_t(&mut rng, &[3])];
    check(ps, |g, v| {
        let w = g.softmax_rows(v[0])?;
        let a = g.col_scale(v[1], w, 0)?;
        let b = g.col_scale(v[1], w, 2)?;
        let b = g.elem_scale(b, v[2], 1)?;
        let c = g.add(a, b)?;
        let c = g.mul(c, c)?;
        Ok(g.sum(c))
    });
}

#[test]
fn inference_graph_matches_recording_graph() {
    let mut rng = Rng::new(11);
    let a = rand_t(&mut rng, &[3, 3]);
    let mut g1 = Graph::new();
    let mut g2 = Graph::<f64>::inference();
    let v1 = g1.param(a.clone());
    let v2 = g2.constant(a);
    let o1 = g1.gelu(v1);
    let o2 = g2.gelu(v2);
    assert_eq!(g1.value(o1), g2.value(o2));
}

fn power_iteration_top(x: &Tensor<f64>, k: usize, rng: &mut Rng) -> Vec<f64> {
    // Deflated power iteration on XᵀX.
    let xtx = ops::matmul_tn(x, x).unwrap();
    let n = xtx.shape()[0];
    let mut a = xtx.to_f64_vec();
    let mut out = Vec::new();
    for _ in 0..k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut lambda = 0.0;
        for _ in 0..3000 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    w[i] += a[i * n + j] * v[j];
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            lambda = norm;
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            if delta < 1e-14 {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        out.push(lambda.sqrt());
    }
    out
}

#[test]
fn singular_values_match_power_iteration() {
    let mut rng = Rng::new(12);
    let x = rand_t(&mut rng, &[256, 128]);
    let sv = singular_values(&x, 5).unwrap();
    let oracle = power_iteration_top(&x, 5, &mut rng);
    for (a, b) in sv.iter().zip(&oracle) {
        assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn singular_values_of_known_matrices() {
    let eye = Tensor::<f64>::eye(6);
    assert!(singular_values(&eye, 6).unwrap().iter().all(|s| (s - 1.0).abs() < 1e-12));
    let diag = Tensor::<f64>::from_rows(&[vec![3.0, 0.0], vec![0.0, -4.0], vec![0.0, 0.0]]).unwrap();
    let s = singular_values(&diag, 2).unwrap();
    assert!((s[0] - 4.0).abs() < 1e-12 && (s[1] - 3.0).abs() < 1e-12);
    assert!(singular_values(&diag, 3).is_err());
}

#[test]
fn jacobi_eigenvalues_of_symmetric_matrix() {
    // [[2,1],[1,2]] has eigenvalues 3 and 1.
    let e = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
    assert!((e[0] - 3.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
}

#[test]
fn rng_streams_are_reproducible_and_distinct() {
    let mut a = Rng::new(42);
    let mut b = Rng::new(42);
    let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
    let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
    assert_eq!(xs, ys);
    let mut c = Rng::new(42).split(1);
    let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
    assert_ne!(xs, zs);
}

#[test]
fn orthogonal_matrix_is_orthogonal() {
    let mut rng = Rng::new(13);
    let q = rng.orthogonal(7);
    let qtq = ops::matmul_tn(&q, &q).unwrap();
    assert!(qtq.max_abs_diff(&Tensor::eye(7)) < 1e-12);
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let c = rand_t(&mut rng, &[n, p]);
        let left = ops::matmul(&ops::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = ops::matmul(&a, &ops::matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn tensor_transpose_is_involution(seed in 0u64..1000, r in 1usize..6, c in 1usize..6) {
        let mut rng = Rng::new(seed);
        let a = rand_t(&mut rng, &[r, c]);
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }
}

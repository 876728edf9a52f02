mod common;

use meshloop::diagnostics::{
    aggregate, cka_rbf, effort, mean_std, probe_inputs, probe_model, read_dump, read_report, spectrum,
    write_report, write_sample, Metric, ProbeSample, Sidecar,
};
use meshloop::error::Error;
use meshloop::numerics::ops;
use meshloop::{Model, Rng, SchemeKind, SchemeSpec, Tensor};
use proptest::prelude::*;

fn randn(rng: &mut Rng, l: usize, d: usize) -> Tensor<f64> {
    rng.normal_tensor(&[l, d], 1.0)
}

/// Textbook CKA: explicit H, K, Λ matrices and trace formulas.
fn cka_oracle(x: &Tensor<f64>, y: &Tensor<f64>, theta: f64) -> f64 {
    let l = x.rows();
    let kernel = |m: &Tensor<f64>| -> Vec<Vec<f64>> {
        let dist = |i: usize, j: usize| -> f64 {
            m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let mut ds: Vec<f64> = (0..l).flat_map(|i| (i + 1..l).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = ds.len();
        let med = if n % 2 == 1 { ds[n / 2] } else { 0.5 * (ds[n / 2 - 1] + ds[n / 2]) };
        let sigma = theta * med;
        (0..l)
            .map(|i| (0..l).map(|j| (-dist(i, j).powi(2) / (2.0 * sigma * sigma)).exp()).collect())
            .collect()
    };
    let h: Vec<Vec<f64>> = (0..l)
        .map(|i| (0..l).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / l as f64).collect())
        .collect();
    let mm = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..l).map(|i| (0..l).map(|j| (0..l).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
    };
    let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        let p = mm(&mm(&mm(a, &h), b), &h);
        (0..l).map(|i| p[i][i]).sum()
    };
    let (k, lam) = (kernel(x), kernel(y));
    hsic(&k, &lam) / (hsic(&k, &k) * hsic(&lam, &lam)).sqrt()
}

#[test]
fn effort_examples() {
    let mut rng = Rng::new(1);
    let h = randn(&mut rng, 5, 4);
    assert_eq!(effort(&h, &h).unwrap(), 0.0);
    assert!((effort(&h, &h.scale(-1.0)).unwrap() - 2.0).abs() < 1e-15);
    assert!((effort(&h, &Tensor::zeros(&[5, 4])).unwrap() - 2.0).abs() < 1e-15);
    // 2‖h‖/(3‖h‖) for f(h) = 2h
    assert!((effort(&h, &h.scale(2.0)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let z = Tensor::<f64>::zeros(&[5, 4]);
    assert!(matches!(effort(&z, &z), Err(Error::Data(_))));
    assert!(effort(&h, &Tensor::zeros(&[4, 5])).is_err());
}

#[test]
fn cka_matches_textbook_oracle() {
    let mut rng = Rng::new(2);
    for &(l, theta) in &[(6usize, 1.0), (9, 0.5), (12, 2.0)] {
        let x = randn(&mut rng, l, 4);
        let y = ops::gelu(&randn(&mut rng, l, 3));
        let got = cka_rbf(&x, &y, theta).unwrap();
        let want = cka_oracle(&x, &y, theta);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn cka_examples() {
    let mut rng = Rng::new(3);
    let x = randn(&mut rng, 10, 6);
    assert!((cka_rbf(&x, &x, 1.0).unwrap() - 1.0).abs() <= 1e-12);
    let q = rng.orthogonal(6);
    let xq = ops::matmul(&x, &q).unwrap();
    assert!((cka_rbf(&x, &xq, 1.0).unwrap() - 1.0).abs() <= 1e-8);
    let y = randn(&mut rng, 10, 3);
    assert!((cka_rbf(&x, &y, 1.0).unwrap() - cka_rbf(&y, &x, 1.0).unwrap()).abs() <= 1e-12);

    let same = Tensor::<f64>::full(&[5, 3], 0.7);
    assert!(matches!(cka_rbf(&same, &randn(&mut rng, 5, 3), 1.0), Err(Error::DegenerateInput(_))));
    assert!(cka_rbf(&x, &x, 0.0).is_err());
    assert!(cka_rbf(&randn(&mut rng, 2, 3), &randn(&mut rng, 2, 3), 1.0).is_err());
}

#[test]
fn spectrum_examples() {
    let eye = Tensor::<f64>::eye(60);
    let s = spectrum(&eye).unwrap();
    assert_eq!(s.len(), 50);
    assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));

    let mut rng = Rng::new(4);
    let u = randn(&mut rng, 30, 1);
    let v = randn(&mut rng, 1, 20);
    let s = spectrum(&ops::matmul(&u, &v).unwrap()).unwrap();
    assert_eq!(s.len(), 20);
    assert_eq!(s[0], 1.0);
    assert!(s[1..].iter().all(|&x| x <= 1e-8), "{:?}", &s[..3]);

    assert_eq!(spectrum(&randn(&mut rng, 8, 5)).unwrap().len(), 5);
    assert!(matches!(spectrum(&Tensor::<f64>::zeros(&[4, 4])), Err(Error::DegenerateInput(_))));
}

#[test]
fn spectrum_invariances() {
    let mut rng = Rng::new(5);
    let x = randn(&mut rng, 24, 12);
    let s = spectrum(&x).unwrap();
    let mut perm: Vec<usize> = (0..24).collect();
    rng.shuffle(&mut perm);
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
    let sp = spectrum(&Tensor::<f64>::from_rows(&rows).unwrap()).unwrap();
    let sq = spectrum(&ops::matmul(&x, &rng.orthogonal(12)).unwrap()).unwrap();
    for i in 0..s.len() {
        assert!((s[i] - sp[i]).abs() <= 1e-8);
        assert!((s[i] - sq[i]).abs() <= 1e-8);
    }
}

fn sample(rng: &mut Rng, id: &str, l: usize, d: usize) -> ProbeSample {
    let stages = ["h_emb", "h0", "h1", "h2", "h_out"]
        .iter()
        .map(|n| (n.to_string(), randn(rng, l, d)))
        .collect();
    let blocks = ["pre", "core1", "core2", "coda"]
        .iter()
        .map(|n| (n.to_string(), randn(rng, l, d), randn(rng, l, d)))
        .collect();
    ProbeSample {
        id: id.into(),
        config_hash: "abc".into(),
        stages,
        blocks,
    }
}

#[test]
fn aggregate_single_and_identical_samples() {
    let mut rng = Rng::new(6);
    let s = sample(&mut rng, "a", 8, 6);
    let one = aggregate(std::slice::from_ref(&s), &Metric::ALL, 1.0).unwrap();
    assert!(one.effort.iter().all(|r| r.std == 0.0));
    assert!(one.spectrum.iter().all(|r| r.std == 0.0));
    let mut t = s.clone();
    t.id = "b".into();
    let two = aggregate(&[s, t], &Metric::ALL, 1.0).unwrap();
    assert_eq!(two.samples, 2);
    for (a, b) in one.effort.iter().zip(&two.effort) {
        assert_eq!(a.mean, b.mean);
        assert_eq!(b.std, 0.0);
    }
    for (a, b) in one.cka.iter().zip(&two.cka) {
        assert_eq!(a.mean, b.mean);
    }
    for (a, b) in one.spectrum.iter().zip(&two.spectrum) {
        assert_eq!(a.mean, b.mean);
        assert_eq!(b.std, 0.0);
    }
}

#[test]
fn aggregate_matches_flat_recomputation() {
    let mut rng = Rng::new(7);
    let samples: Vec<ProbeSample> = (0..5).map(|i| sample(&mut rng, &format!("s{i}"), 8, 6)).collect();
    let rep = aggregate(&samples, &Metric::ALL, 1.0).unwrap();

    for (j, row) in rep.effort.iter().enumerate() {
        let vals: Vec<f64> = samples
            .iter()
            .map(|s| {
                let (_, a, b) = &s.blocks[j];
                let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                2.0 * num / (na + nb)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((row.mean - mean).abs() <= 1e-12 && (row.std - std).abs() <= 1e-12);
    }

    let names = samples[0].stage_names();
    assert_eq!(rep.cka.len(), names.len() * names.len());
    for a in 0..names.len() {
        assert_eq!(rep.cka_of(names[a], names[a]), Some(1.0));
        for b in 0..names.len() {
            let ab = rep.cka_of(names[a], names[b]).unwrap();
            assert_eq!(ab, rep.cka_of(names[b], names[a]).unwrap());
            if a != b {
                let want = samples
                    .iter()
                    .map(|s| cka_oracle(&s.stages[a].1, &s.stages[b].1, 1.0))
                    .sum::<f64>()
                    / samples.len() as f64;
                assert!((ab - want).abs() <= 1e-12);
            }
        }
    }

    let rows = rep.spectrum_of("h1");
    assert_eq!(rows.len(), 6);
    let per: Vec<Vec<f64>> = samples.iter().map(|s| spectrum(&s.stages[2].1).unwrap()).collect();
    for r in rows {
        let (m, sd) = mean_std(&per.iter().map(|v| v[r.index]).collect::<Vec<_>>());
        assert!((r.mean - m).abs() <= 1e-12 && (r.std - sd).abs() <= 1e-12);
        assert!(r.mean > 0.0 && r.mean <= 1.0);
    }
}

#[test]
fn aggregate_rejects_inconsistent_samples() {
    let mut rng = Rng::new(8);
    let a = sample(&mut rng, "a", 8, 6);
    let b = sample(&mut rng, "b", 7, 6);
    assert!(matches!(aggregate(&[a.clone(), b], &Metric::ALL, 1.0), Err(Error::Data(_))));
    let mut c = sample(&mut rng, "c", 8, 6);
    c.stages.pop();
    assert!(matches!(aggregate(&[a, c], &Metric::ALL, 1.0), Err(Error::Data(_))));
    assert!(aggregate(&[], &Metric::ALL, 1.0).is_err());
    assert_eq!("cka".parse::<Metric>().unwrap(), Metric::Cka);
    assert!("linear".parse::<Metric>().is_err());
}

#[test]
fn report_csv_round_trip_is_exact() {
    let mut rng = Rng::new(9);
    let samples: Vec<ProbeSample> = (0..3).map(|i| sample(&mut rng, &format!("s{i}"), 8, 6)).collect();
    let rep = aggregate(&samples, &Metric::ALL, 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &rep).unwrap();
    let back = read_report(dir.path()).unwrap();
    assert_eq!(back.effort, rep.effort);
    assert_eq!(back.cka, rep.cka);
    assert_eq!(back.spectrum, rep.spectrum);

    let header = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert!(header.starts_with("stage,index,mean,std\n"));
    let json: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(dir.path().join("effort.json")).unwrap()).unwrap();
    assert_eq!(json.len(), 4);
    assert!(json[0].get("block").is_some() && json[0].get("std").is_some());

    let only = aggregate(&samples, &[Metric::Effort], 1.0).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    write_report(dir2.path(), &only).unwrap();
    assert!(!dir2.path().join("cka.csv").exists());
}

#[test]
fn dump_round_trip_through_f32() {
    let mut rng = Rng::new(10);
    let samples: Vec<ProbeSample> = (0..2).map(|i| sample(&mut rng, &format!("sample_{i:04}"), 6, 4)).collect();
    let dir = tempfile::tempdir().unwrap();
    for s in &samples {
        write_sample(dir.path(), s).unwrap();
    }
    let back = read_dump(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(b.config_hash, "abc");
        assert_eq!(a.stage_names(), b.stage_names());
        assert_eq!(a.block_names(), b.block_names());
        for ((_, x), (_, y)) in a.stages.iter().zip(&b.stages) {
            assert_eq!(&x.cast::<f32>().cast::<f64>(), y);
        }
    }

    for entry in std::fs::read_dir(dir.path().join("sample_0000")).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().unwrap() == "json" {
            let side: Sidecar = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
            let bytes = std::fs::metadata(p.with_extension("bin")).unwrap().len() as usize;
            assert_eq!(side.shape.iter().product::<usize>(), bytes / 4);
            assert_eq!(side.dtype, "f32");
        }
    }

    std::fs::write(dir.path().join("sample_0001/h1.bin"), [0u8; 12]).unwrap();
    assert!(matches!(read_dump(dir.path()), Err(Error::Data(_))));
}

#[test]
fn identity_model_probe_has_zero_effort() {
    let cfg = common::config("1+2R2+1", SchemeSpec::new(SchemeKind::Base), 8, 2, 11, 6);
    let mut model = Model::<f64>::init(cfg).unwrap();
    common::zero_out_projections(&mut model);
    let mut rng = Rng::new(11);
    let ids: Vec<usize> = (0..200).map(|i| i % 11).collect();
    let inputs = probe_inputs(&ids, 4, 6, &mut rng).unwrap();
    let samples = probe_model(&model, &inputs).unwrap();
    assert_eq!(samples[3].id, "sample_0003");
    let rep = aggregate(&samples, &[Metric::Effort], 1.0).unwrap();
    let names: Vec<&str> = rep.effort.iter().map(|r| r.block.as_str()).collect();
    assert_eq!(names, ["pre", "core1", "core2", "coda"]);
    assert!(rep.effort.iter().all(|r| r.mean == 0.0 && r.std == 0.0));
    assert!(probe_inputs(&ids[..3], 1, 6, &mut rng).is_err());
}

proptest! {
    #[test]
    fn effort_in_range(seed in 0u64..100_000, l in 1usize..6, d in 1usize..6, s in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let h = randn(&mut rng, l, d);
        let f = randn(&mut rng, l, d).add(&h.scale(s)).unwrap();
        let e = effort(&h, &f).unwrap();
        prop_assert!((0.0..=2.0).contains(&e));
        prop_assert!(e > 0.0);
    }

    #[test]
    fn cka_in_unit_interval_and_symmetric(seed in 0u64..100_000, l in 3usize..10, theta in 0.2f64..3.0) {
        let mut rng = Rng::new(seed);
        let x = randn(&mut rng, l, 3);
        let y = randn(&mut rng, l, 5);
        let a = cka_rbf(&x, &y, theta).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - cka_rbf(&y, &x, theta).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn spectrum_is_nonincreasing(seed in 0u64..100_000, l in 1usize..20, d in 1usize..20) {
        let mut rng = Rng::new(seed);
        let s = spectrum(&randn(&mut rng, l, d)).unwrap();
        prop_assert_eq!(s.len(), l.min(d));
        prop_assert_eq!(s[0], 1.0);
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(s.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

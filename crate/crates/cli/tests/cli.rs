use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meshloop::model::save_checkpoint;
use meshloop::numerics::Dtype;
use meshloop::{LayerPlan, Model, ModelConfig, SchemeKind, SchemeSpec, Tensor};

fn meshloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshloop"))
        .args(args)
        .env_remove("MESH_SEED")
        .output()
        .expect("spawn meshloop")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
plan = 1+1R2+1
scheme = mesh
d_model = 16
n_heads = 2
steps = 12
batch = 2
seq_len = 12
synthetic_bytes = 8000
";

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn params_prints_router_count() {
    let o = meshloop(&["params", "--plan", "4+8R2+4", "--hidden", "2048", "--scheme", "mesh", "--buffer", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("61,470 with bias"), "{out}");
    assert!(out.contains("61,440 without"), "{out}");
    assert!(out.contains("parameter reduction: 33.3%"), "{out}");
}

#[test]
fn params_reductions_at_printed_precision() {
    for (plan, pct) in [("2+4R2+2", "33.3"), ("1+2R3+1", "50.0"), ("2+2R3+2", "40.0")] {
        let o = meshloop(&["params", "--plan", plan, "--hidden", "64", "--scheme", "base"]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains(&format!("parameter reduction: {pct}%")), "{plan}: {}", stdout(&o));
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(meshloop(&["params", "--plan", "1+2R2+1", "--bogus"]).status.code(), Some(2));
    assert_eq!(meshloop(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(meshloop(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.cfg");
    let o = meshloop(&["train", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = meshloop(&["params", "--plan", "1+2X2+1", "--hidden", "8"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_on_identity_model_dump_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 32,
        vocab: 9,
        max_seq: 6,
        plan: "1+2R2+1".parse::<LayerPlan>().unwrap(),
        scheme: SchemeSpec::new(SchemeKind::Base),
        dtype: Dtype::F64,
        seed: 1,
    };
    let mut model = Model::<f64>::init(cfg).unwrap();
    let names: Vec<String> = model.params.names().to_vec();
    for n in names.iter().filter(|n| ["attn.wo", "attn.bo", "mlp.w2", "mlp.b2"].iter().any(|s| n.ends_with(s))) {
        let t = model.params.get_mut(n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let ckpt = dir.path().join("identity.ckpt");
    save_checkpoint(&ckpt, &model, None, 0).unwrap();
    let dump = dir.path().join("dump");
    let o = meshloop(&["probe", "--checkpoint", ckpt.to_str().unwrap(), "--out", dump.to_str().unwrap(), "--samples", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = meshloop(&["report", "--dump", dump.to_str().unwrap(), "--metric", "effort"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip_while(|l| !l.starts_with("block,")).skip(1).collect();
    assert_eq!(rows.len(), 4, "{out}");
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[1].parse::<f64>().unwrap(), 0.0, "{r}");
    }
}

#[test]
fn train_probe_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_meshloop"))
        .args(["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--set", "steps=10"])
        .env("MESH_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("seed = 41"), "{echoed}");
    assert!(echoed.contains("steps = 10"), "{echoed}");
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 11);

    let dump = dir.path().join("dump");
    let ckpt = run.join("final.ckpt");
    let o = meshloop(&[
        "probe", "--checkpoint", ckpt.to_str().unwrap(), "--out", dump.to_str().unwrap(),
        "--samples", "2", "--synthetic-bytes", "8000",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let rep = dir.path().join("rep");
    let o = meshloop(&["report", "--dump", dump.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["effort.csv", "effort.json", "cka.csv", "cka.json", "spectrum.csv", "spectrum.json"] {
        assert!(rep.join(f).exists(), "{f}");
    }
}

#[test]
fn ablate_buffer_tabulates_each_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("abl");
    let o = meshloop(&["ablate-buffer", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "steps=4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let rows: Vec<(usize, usize)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows, [(0, 3), (1, 4), (2, 5), (3, 6)]);
}

#[test]
fn ablate_buffer_rejects_non_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("abl");
    let o = meshloop(&["ablate-buffer", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "scheme=base"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let o = meshloop(&["selftest"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 14, "{out}");
    assert!(!out.contains("FAIL"));
}

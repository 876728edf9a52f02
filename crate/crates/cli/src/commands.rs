use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use meshloop::diagnostics::{aggregate, probe_inputs, probe_model, read_dump, write_report, write_sample, Metric};
use meshloop::mesh::router_param_count;
use meshloop::model::load_checkpoint;
use meshloop::runconfig::{RunConfig, SEED_ENV};
use meshloop::training::{synthetic_corpus, train as train_model, CharCorpus, TrainOutcome};
use meshloop::{format_percent, Dtype, LayerPlan, Rng, SchemeKind};

use crate::RunArgs;

/// Manifest, then `--set` overrides, then `MESH_SEED`.
fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim(), 0).with_context(|| format!("--set {kv}"))?;
    }
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

struct Finished {
    final_loss: f64,
    steps: usize,
}

fn run_training(cfg: &RunConfig, out: &Path) -> Result<Finished> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let data = cfg.data_source()?;
    let mc = cfg.model_config(data.vocab_size())?;
    fn done<T>(o: TrainOutcome<T>) -> Finished {
        Finished {
            final_loss: o.final_loss(),
            steps: o.log.len(),
        }
    }
    Ok(match cfg.train.dtype {
        Dtype::F32 => done(train_model::<f32>(mc, &cfg.train, &data, Some(out))?),
        Dtype::F64 => done(train_model::<f64>(mc, &cfg.train, &data, Some(out))?),
    })
}

pub fn train(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let f = run_training(&cfg, &args.out)?;
    println!(
        "trained {} ({}) for {} steps: final loss {:.4}; artifacts in {}",
        cfg.plan,
        cfg.scheme,
        f.steps,
        f.final_loss,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub samples: usize,
    pub seq_len: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub corpus_seed: u64,
    pub synthetic_bytes: usize,
    pub seed: u64,
}

pub fn probe(a: &ProbeArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint::<f64>(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = ckpt.model;
    let seq_len = a.seq_len.unwrap_or(model.cfg.max_seq);
    if seq_len > model.cfg.max_seq {
        bail!("--seq-len {seq_len} exceeds the model maximum {}", model.cfg.max_seq);
    }
    let mut rng = Rng::with_stream(a.seed, 77);
    let inputs = match &ckpt.vocab {
        Some(vocab) => {
            let text = match &a.corpus {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => synthetic_corpus(a.corpus_seed, a.synthetic_bytes),
            };
            let ids = CharCorpus::encode(vocab, &text)?;
            probe_inputs(&ids, a.samples, seq_len, &mut rng)?
        }
        // Token-level tasks carry no text vocabulary; probe with uniform tokens.
        None => (0..a.samples)
            .map(|_| (0..seq_len).map(|_| rng.below(model.cfg.vocab)).collect())
            .collect(),
    };
    let samples = probe_model(&model, &inputs)?;
    for s in &samples {
        write_sample(&a.out, s)?;
    }
    println!(
        "dumped {} samples × {} stages to {}",
        samples.len(),
        samples.first().map_or(0, |s| s.stages.len()),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn report(dump: &Path, out: Option<&Path>, metrics: &[String], theta: f64) -> Result<ExitCode> {
    let metrics: Vec<Metric> = if metrics.is_empty() {
        Metric::ALL.to_vec()
    } else {
        metrics.iter().map(|m| m.parse()).collect::<meshloop::Result<_>>()?
    };
    let samples = read_dump(dump)?;
    let rep = aggregate(&samples, &metrics, theta)?;
    if let Some(dir) = out {
        write_report(dir, &rep)?;
    }
    let mut w = std::io::stdout().lock();
    writeln!(w, "# {} samples", rep.samples)?;
    if !rep.effort.is_empty() {
        writeln!(w, "block,mean,std")?;
        for r in &rep.effort {
            writeln!(w, "{},{:.6},{:.6}", r.block, r.mean, r.std)?;
        }
    }
    if !rep.cka.is_empty() {
        writeln!(w, "stage_a,stage_b,mean")?;
        for r in &rep.cka {
            writeln!(w, "{},{},{:.6}", r.stage_a, r.stage_b, r.mean)?;
        }
    }
    if !rep.spectrum.is_empty() {
        writeln!(w, "stage,index,mean,std")?;
        for r in &rep.spectrum {
            writeln!(w, "{},{},{:.6e},{:.6e}", r.stage, r.index, r.mean, r.std)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn params(plan: &str, hidden: usize, scheme: &str, buffer: Option<usize>) -> Result<ExitCode> {
    let plan: LayerPlan = plan.parse().with_context(|| format!("plan '{plan}'"))?;
    let kind: SchemeKind = scheme.parse()?;
    println!("plan {plan}: {} compute layers, {} unique", plan.n_compute(), plan.n_unique());
    if plan.recursive {
        println!("parameter reduction: {}%", format_percent(plan.param_reduction()));
    }
    if kind == SchemeKind::Mesh {
        let b = buffer.unwrap_or_else(|| meshloop::mesh::default_buffer_len(plan.n_loop));
        println!(
            "router parameters (B = {b}): {} with bias, {} without",
            thousands(router_param_count(&plan, hidden, b, true)),
            thousands(router_param_count(&plan, hidden, b, false))
        );
    } else {
        if buffer.is_some() {
            bail!("--buffer only applies to the mesh scheme");
        }
        println!("router parameters: 0 (scheme {kind})");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate_buffer(args: &RunArgs, ks: &[usize]) -> Result<ExitCode> {
    let base = load_config(args)?;
    if base.scheme != SchemeKind::Mesh {
        bail!("ablate-buffer needs scheme = mesh, config has {}", base.scheme);
    }
    fs::create_dir_all(&args.out)?;
    let table = args.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&table)?;
    w.write_record(["k", "buffer", "final_loss"])?;
    println!("k,buffer,final_loss");
    for &k in ks {
        let mut cfg = base.clone();
        let b = cfg.plan.n_loop + 1 + k;
        cfg.buffer = Some(b);
        let f = run_training(&cfg, &args.out.join(format!("k{k}")))?;
        w.write_record([k.to_string(), b.to_string(), format!("{:.16e}", f.final_loss)])?;
        println!("{k},{b},{:.6}", f.final_loss);
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

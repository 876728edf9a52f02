//! Flat `key = value` run manifests mapping onto model, training and data
//! settings. `#` starts a comment; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::plan::LayerPlan;
use crate::recurrence::{SchemeKind, SchemeSpec};
use crate::training::{synthetic_corpus, CharCorpus, DataSource, NeedleSpec, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MESH_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Text file given by `corpus`.
    Chars,
    /// Generated grammar text of `synthetic_bytes` bytes.
    Synthetic,
    Needle,
}

impl DataKind {
    fn as_str(self) -> &'static str {
        match self {
            DataKind::Chars => "chars",
            DataKind::Synthetic => "synthetic",
            DataKind::Needle => "needle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub plan: LayerPlan,
    pub scheme: SchemeKind,
    pub buffer: Option<usize>,
    pub share_core: bool,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: Option<usize>,
    pub train: TrainConfig,
    pub data: DataKind,
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub needle_vocab: usize,
    pub needle_payload: usize,
    pub needle_distance: usize,
    pub probe_samples: usize,
    pub cka_theta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plan: LayerPlan::recursive(1, 2, 3, 1).expect("valid plan"),
            scheme: SchemeKind::Base,
            buffer: None,
            share_core: true,
            d_model: 64,
            n_heads: 4,
            d_ff: None,
            train: TrainConfig::default(),
            data: DataKind::Synthetic,
            corpus: None,
            synthetic_bytes: 1_000_000,
            needle_vocab: 32,
            needle_payload: 8,
            needle_distance: 16,
            probe_samples: 32,
            cka_theta: 1.0,
        }
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn value<V: std::str::FromStr>(offset: usize, key: &str, raw: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| parse_err(offset, format!("bad value for {key}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.split('#').next().unwrap_or("");
            if body.trim().is_empty() {
                continue;
            }
            let Some(eq) = body.find('=') else {
                return Err(parse_err(start, "expected `key = value`"));
            };
            let key = body[..eq].trim();
            let raw = body[eq + 1..].trim();
            let at = start + eq + 1;
            if key.is_empty() {
                return Err(parse_err(start, "missing key"));
            }
            if raw.is_empty() {
                return Err(parse_err(at, format!("missing value for {key}")));
            }
            cfg.set(key, raw, at)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key; `offset` locates the value for error reporting.
    pub fn set(&mut self, key: &str, raw: &str, offset: usize) -> Result<()> {
        let t = &mut self.train;
        match key {
            "plan" => {
                self.plan = raw.parse().map_err(|e: Error| match e {
                    Error::Parse { offset: o, message } => parse_err(offset + o, message),
                    other => other,
                })?
            }
            "scheme" => self.scheme = value(offset, key, raw)?,
            "buffer" => {
                self.buffer = if raw == "default" {
                    None
                } else {
                    Some(value(offset, key, raw)?)
                }
            }
            "share_core" => self.share_core = value(offset, key, raw)?,
            "d_model" => self.d_model = value(offset, key, raw)?,
            "n_heads" => self.n_heads = value(offset, key, raw)?,
            "d_ff" => self.d_ff = Some(value(offset, key, raw)?),
            "dtype" => t.dtype = value(offset, key, raw)?,
            "seed" => t.seed = value(offset, key, raw)?,
            "steps" => t.steps = value(offset, key, raw)?,
            "batch" => t.batch = value(offset, key, raw)?,
            "seq_len" => t.seq_len = value(offset, key, raw)?,
            "peak_lr" => t.peak_lr = value(offset, key, raw)?,
            "beta1" => t.betas.0 = value(offset, key, raw)?,
            "beta2" => t.betas.1 = value(offset, key, raw)?,
            "weight_decay" => t.weight_decay = value(offset, key, raw)?,
            "warmup_frac" => t.warmup_frac = value(offset, key, raw)?,
            "final_lr_frac" => t.final_lr_frac = value(offset, key, raw)?,
            "eval_every" => t.eval_every = value(offset, key, raw)?,
            "checkpoint_frac" => t.checkpoint_frac = value(offset, key, raw)?,
            "grad_clip" => t.grad_clip = value(offset, key, raw)?,
            "single_epoch" => t.single_epoch = value(offset, key, raw)?,
            "data" => {
                self.data = match raw {
                    "chars" => DataKind::Chars,
                    "synthetic" => DataKind::Synthetic,
                    "needle" => DataKind::Needle,
                    _ => {
                        return Err(parse_err(
                            offset,
                            format!("unknown data source '{raw}' (chars, synthetic, needle)"),
                        ))
                    }
                }
            }
            "corpus" => self.corpus = Some(PathBuf::from(raw)),
            "synthetic_bytes" => self.synthetic_bytes = value(offset, key, raw)?,
            "needle_vocab" => self.needle_vocab = value(offset, key, raw)?,
            "needle_payload" => self.needle_payload = value(offset, key, raw)?,
            "needle_distance" => self.needle_distance = value(offset, key, raw)?,
            "probe_samples" => self.probe_samples = value(offset, key, raw)?,
            "cka_theta" => self.cka_theta = value(offset, key, raw)?,
            _ => return Err(parse_err(offset, format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies the `MESH_SEED` override when present.
    pub fn apply_seed_override(&mut self, env_value: Option<&str>) -> Result<()> {
        if let Some(v) = env_value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{SEED_ENV}='{v}': {e}")))?;
        }
        Ok(())
    }

    pub fn scheme_spec(&self) -> SchemeSpec {
        let mut s = SchemeSpec::new(self.scheme);
        if self.scheme == SchemeKind::Mesh {
            s.mesh_slots = Some(self.buffer.unwrap_or_else(|| {
                crate::mesh::default_buffer_len(self.plan.n_loop)
            }));
        } else {
            s.mesh_slots = self.buffer;
        }
        s.share_core = self.share_core;
        s
    }

    pub fn model_config(&self, vocab: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(4 * self.d_model),
            vocab,
            max_seq: self.train.seq_len,
            plan: self.plan,
            scheme: self.scheme_spec(),
            dtype: self.train.dtype,
            seed: self.train.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads or generates the configured training data.
    pub fn data_source(&self) -> Result<DataSource> {
        match self.data {
            DataKind::Chars => {
                let path = self
                    .corpus
                    .as_ref()
                    .ok_or_else(|| Error::Config("data = chars needs a corpus path".into()))?;
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(DataSource::Chars(CharCorpus::from_text(&text)?))
            }
            DataKind::Synthetic => Ok(DataSource::Chars(CharCorpus::from_text(
                &synthetic_corpus(self.train.seed, self.synthetic_bytes),
            )?)),
            DataKind::Needle => {
                let spec = NeedleSpec {
                    vocab: self.needle_vocab,
                    payload_alphabet: self.needle_payload,
                    distance: self.needle_distance,
                };
                spec.validate(self.train.seq_len)?;
                Ok(DataSource::Needle(spec))
            }
        }
    }

    /// The effective configuration in the same format [`RunConfig::parse`]
    /// reads.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("plan", self.plan.to_string());
        kv("scheme", self.scheme.to_string());
        kv(
            "buffer",
            self.buffer.map_or("default".into(), |b| b.to_string()),
        );
        kv("share_core", self.share_core.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_heads", self.n_heads.to_string());
        if let Some(ff) = self.d_ff {
            kv("d_ff", ff.to_string());
        }
        kv("dtype", t.dtype.to_string());
        kv("seed", t.seed.to_string());
        kv("steps", t.steps.to_string());
        kv("batch", t.batch.to_string());
        kv("seq_len", t.seq_len.to_string());
        kv("peak_lr", format!("{:e}", t.peak_lr));
        kv("beta1", t.betas.0.to_string());
        kv("beta2", t.betas.1.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("warmup_frac", t.warmup_frac.to_string());
        kv("final_lr_frac", t.final_lr_frac.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("checkpoint_frac", t.checkpoint_frac.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("single_epoch", t.single_epoch.to_string());
        kv("data", self.data.as_str().into());
        if let Some(c) = &self.corpus {
            kv("corpus", c.display().to_string());
        }
        kv("synthetic_bytes", self.synthetic_bytes.to_string());
        kv("needle_vocab", self.needle_vocab.to_string());
        kv("needle_payload", self.needle_payload.to_string());
        kv("needle_distance", self.needle_distance.to_string());
        kv("probe_samples", self.probe_samples.to_string());
        kv("cka_theta", self.cka_theta.to_string());
        s
    }
}

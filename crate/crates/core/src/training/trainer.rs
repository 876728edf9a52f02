use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::data::{needle_task, CharCorpus, NeedleSample, NeedleSpec, Sequence, WindowSampler};
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::numerics::{Rng, Scalar, Tensor};

/// Needle evaluation set size.
pub const NEEDLE_EVAL_SAMPLES: usize = 64;

#[derive(Debug, Clone)]
pub enum DataSource {
    Chars(CharCorpus),
    Needle(NeedleSpec),
}

impl DataSource {
    pub fn vocab_size(&self) -> usize {
        match self {
            DataSource::Chars(c) => c.vocab.len(),
            DataSource::Needle(n) => n.vocab,
        }
    }

    pub fn char_vocab(&self) -> Option<&[char]> {
        match self {
            DataSource::Chars(c) => Some(&c.vocab),
            DataSource::Needle(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<StepLog>,
    pub needle_eval: Vec<(usize, f64)>,
}

impl<T> TrainOutcome<T> {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.loss)
    }
}

enum Feed<'a> {
    Chars(&'a CharCorpus, WindowSampler),
    Needle(NeedleSpec, Rng),
}

impl Feed<'_> {
    fn next(&mut self, seq_len: usize) -> Result<Sequence> {
        match self {
            Feed::Chars(c, s) => s.next_sequence(&c.ids),
            Feed::Needle(spec, rng) => Ok(needle_task(rng, seq_len, spec)?.seq),
        }
    }
}

/// Fraction of needle queries whose argmax prediction is the payload.
pub fn needle_accuracy<T: Scalar>(model: &Model<T>, samples: &[NeedleSample]) -> Result<f64> {
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&s.seq.tokens)?;
            let row = out.logits.row(s.query_pos);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.to_f64().total_cmp(&b.1.to_f64()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("non-empty vocab");
            Ok(best == s.payload)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Mean loss and summed gradients over a batch, reduced in batch order.
pub fn batch_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batch: &[Sequence],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let per: Vec<(f64, Vec<Tensor<T>>)> = batch
        .par_iter()
        .map(|s| {
            let (loss, grads, _) = model.loss_and_grads(&s.tokens, &s.targets)?;
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut acc) = iter.next().ok_or_else(|| Error::Data("empty batch".into()))?;
    for (l, grads) in iter {
        loss += l;
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.add_assign(g)?;
        }
    }
    let inv = T::from_f64(1.0 / n);
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((loss / n, acc))
}

struct Sink {
    dir: PathBuf,
    loss: fs::File,
    needle: Option<fs::File>,
}

impl Sink {
    fn open(dir: &Path, needle: bool) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<fs::File> {
            let p = dir.join(name);
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(f)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            loss: open("loss.csv", "step,loss,lr,grad_norm")?,
            needle: if needle {
                Some(open("needle_eval.csv", "step,query_accuracy")?)
            } else {
                None
            },
        })
    }

    fn step(&mut self, l: &StepLog) -> Result<()> {
        writeln!(
            self.loss,
            "{},{:.16e},{:.16e},{:.16e}",
            l.step, l.loss, l.lr, l.grad_norm
        )
        .map_err(|e| Error::io(self.dir.join("loss.csv"), e))
    }

    fn needle(&mut self, step: usize, acc: f64) -> Result<()> {
        if let Some(f) = &mut self.needle {
            writeln!(f, "{step},{acc:.16e}")
                .map_err(|e| Error::io(self.dir.join("needle_eval.csv"), e))?;
        }
        Ok(())
    }
}

/// Trains a fresh model. With `out_dir` set, writes `loss.csv`, periodic
/// checkpoints under `checkpoints/`, `final.ckpt`, and `needle_eval.csv`
/// for the needle task. Identical inputs give bitwise-identical outputs.
pub fn train<T: Scalar>(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &DataSource,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model_cfg.vocab != data.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab {} does not match data vocab {}",
            model_cfg.vocab,
            data.vocab_size()
        )));
    }
    if cfg.seq_len > model_cfg.max_seq {
        return Err(Error::Config(format!(
            "seq_len {} exceeds max_seq {}",
            cfg.seq_len, model_cfg.max_seq
        )));
    }
    let mut model = Model::<T>::init(model_cfg)?;
    let decay: Vec<bool> = (0..model.params.len()).map(|i| model.decays(i)).collect();
    let mut opt = AdamW::new(model.params.tensors(), cfg.betas, cfg.weight_decay);
    let root = Rng::new(cfg.seed);
    let mut feed = match data {
        DataSource::Chars(c) => Feed::Chars(
            c,
            WindowSampler::new(c.ids.len(), cfg.seq_len, root.split(1), cfg.single_epoch)?,
        ),
        DataSource::Needle(spec) => {
            spec.validate(cfg.seq_len)?;
            Feed::Needle(*spec, root.split(1))
        }
    };
    let eval_set: Vec<NeedleSample> = match data {
        DataSource::Needle(spec) if cfg.eval_every > 0 => {
            let mut r = root.split(2);
            (0..NEEDLE_EVAL_SAMPLES)
                .map(|_| needle_task(&mut r, cfg.seq_len, spec))
                .collect::<Result<_>>()?
        }
        _ => Vec::new(),
    };
    let mut sink = match out_dir {
        Some(d) => Some(Sink::open(d, !eval_set.is_empty())?),
        None => None,
    };
    let ckpt_every = cfg.checkpoint_every();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut needle_eval = Vec::new();

    for step in 0..cfg.steps {
        let batch: Vec<Sequence> = (0..cfg.batch)
            .map(|_| feed.next(cfg.seq_len))
            .collect::<Result<_>>()?;
        let (loss, mut grads) = batch_loss_and_grads(&model, &batch)?;
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if grad_norm > cfg.grad_clip {
            log::debug!("step {step}: clipped gradient norm {grad_norm:.4}");
        }
        let lr = lr_at(step, cfg);
        opt.step(model.params.tensors_mut(), &grads, lr, &decay)
            .map_err(|e| Error::Numerical(format!("step {step} aborted: {e}")))?;
        let entry = StepLog {
            step,
            loss,
            lr,
            grad_norm,
        };
        if let Some(s) = &mut sink {
            s.step(&entry)?;
        }
        log.push(entry);

        let done = step + 1;
        if !eval_set.is_empty() && (done % cfg.eval_every == 0 || done == cfg.steps) {
            let acc = needle_accuracy(&model, &eval_set)?;
            if let Some(s) = &mut sink {
                s.needle(done, acc)?;
            }
            needle_eval.push((done, acc));
        }
        if let (Some(s), Some(every)) = (&sink, ckpt_every) {
            if done % every == 0 && done != cfg.steps {
                let p = s.dir.join("checkpoints").join(format!("step_{done:06}.ckpt"));
                save_checkpoint(&p, &model, data.char_vocab(), done as u64)?;
            }
        }
        if step % 100 == 0 || done == cfg.steps {
            log::info!("step {step} loss {loss:.4} lr {lr:.3e} grad_norm {grad_norm:.3}");
        }
    }
    if let Some(s) = &sink {
        save_checkpoint(&s.dir.join("final.ckpt"), &model, data.char_vocab(), cfg.steps as u64)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        needle_eval,
    })
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Dtype;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub dtype: Dtype,
    /// Needle evaluation interval in steps; 0 disables it.
    pub eval_every: usize,
    /// Checkpoint interval as a fraction of `steps`; 0 keeps only the final one.
    pub checkpoint_frac: f64,
    pub grad_clip: f64,
    pub single_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.01,
            warmup_frac: 0.01,
            final_lr_frac: 0.10,
            steps: 1000,
            batch: 8,
            seq_len: 64,
            seed: 0,
            dtype: Dtype::F32,
            eval_every: 100,
            checkpoint_frac: 0.1,
            grad_clip: 1.0,
            single_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad(format!("warmup_frac {} outside (0, 1)", self.warmup_frac));
        }
        if !(0.0..1.0).contains(&self.final_lr_frac) {
            return bad(format!("final_lr_frac {} outside [0, 1)", self.final_lr_frac));
        }
        if self.steps == 0 || self.batch == 0 || self.seq_len == 0 {
            return bad("steps, batch and seq_len must be positive".into());
        }
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas ({b1}, {b2}) outside [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return bad("weight_decay must be ≥ 0 and grad_clip > 0".into());
        }
        if !(0.0..=1.0).contains(&self.checkpoint_frac) {
            return bad(format!("checkpoint_frac {} outside [0, 1]", self.checkpoint_frac));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_frac * self.steps as f64).round() as usize).max(1)
    }

    /// Steps between periodic checkpoints, if any.
    pub fn checkpoint_every(&self) -> Option<usize> {
        (self.checkpoint_frac > 0.0)
            .then(|| ((self.checkpoint_frac * self.steps as f64).round() as usize).max(1))
    }
}

/// Linear warmup to the peak, then cosine decay reaching
/// `final_lr_frac × peak` on the last step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let warm = cfg.warmup_steps();
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let last = cfg.steps.saturating_sub(1);
    let span = last.saturating_sub(warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    let floor = cfg.final_lr_frac * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

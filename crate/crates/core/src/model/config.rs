use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Dtype;
use crate::plan::LayerPlan;
use crate::recurrence::SchemeSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub plan: LayerPlan,
    pub scheme: SchemeSpec,
    pub dtype: Dtype,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.d_model / self.n_heads
            )));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("vocab and max_seq must be positive".into()));
        }
        if self.plan.n_compute() == 0 {
            return Err(Error::Config("plan has no layers".into()));
        }
        self.scheme.validate(&self.plan)
    }

    pub fn n_loop(&self) -> usize {
        self.plan.n_loop
    }

    /// Buffer length, for mesh schemes.
    pub fn mesh_slots(&self) -> usize {
        self.scheme.slots(&self.plan)
    }

    /// Number of distinct core stacks.
    pub fn core_copies(&self) -> usize {
        if self.scheme.share_core || !self.plan.recursive {
            1
        } else {
            self.plan.n_loop
        }
    }

    /// Standard deviation of attention and MLP output projections.
    pub fn out_proj_std(&self) -> f64 {
        super::INIT_STD / (2.0 * self.plan.n_compute() as f64).sqrt()
    }

    /// Short stable fingerprint of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

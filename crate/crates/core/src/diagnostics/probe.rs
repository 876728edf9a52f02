use rayon::prelude::*;

use super::dump::ProbeSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Rng, Scalar};

/// `n` random windows of `seq_len` tokens from `ids`, drawn with
/// replacement.
pub fn probe_inputs(ids: &[usize], n: usize, seq_len: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if ids.len() < seq_len {
        return Err(Error::Data(format!(
            "cannot draw {seq_len}-token probes from {} tokens",
            ids.len()
        )));
    }
    let starts = ids.len() - seq_len + 1;
    Ok((0..n)
        .map(|_| {
            let s = rng.below(starts);
            ids[s..s + seq_len].to_vec()
        })
        .collect())
}

/// Runs each input through the model and captures its states. Sample ids
/// are `sample_0000`, `sample_0001`, ...
pub fn probe_model<T: Scalar>(model: &Model<T>, inputs: &[Vec<usize>]) -> Result<Vec<ProbeSample>> {
    let hash = model.cfg.hash();
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let out = model.forward(tokens)?;
            Ok(ProbeSample::from_trace(format!("sample_{i:04}"), &hash, &out.trace))
        })
        .collect()
}

//! On-disk state dumps: `<dir>/<sample_id>/<stage>.bin` (raw f32 LE) with a
//! `<stage>.json` sidecar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StateTrace;
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sample_id: String,
    pub config_hash: String,
}

/// States of one probed sequence, in f64.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub id: String,
    pub config_hash: String,
    /// `h_emb`, `h0 … hK`, `h_out`.
    pub stages: Vec<(String, Tensor<f64>)>,
    /// Whole-stack `(name, input, output)` pairs.
    pub blocks: Vec<(String, Tensor<f64>, Tensor<f64>)>,
}

impl ProbeSample {
    pub fn from_trace<T: Scalar>(id: impl Into<String>, config_hash: &str, trace: &StateTrace<T>) -> Self {
        Self {
            id: id.into(),
            config_hash: config_hash.to_string(),
            stages: trace.stages.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            blocks: trace
                .blocks
                .iter()
                .map(|(n, a, b)| (n.clone(), a.cast(), b.cast()))
                .collect(),
        }
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|(n, _, _)| n.as_str()).collect()
    }
}

fn block_file(block: &str, side: &str) -> String {
    format!("block.{block}.{side}")
}

/// Whether `name` belongs to the stage vocabulary (`h_emb`, `h<t>`, `h_out`).
pub fn is_stage_name(name: &str) -> bool {
    name == "h_emb"
        || name == "h_out"
        || name
            .strip_prefix('h')
            .is_some_and(|t| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()))
}

/// Sort key placing stages in forward order.
fn stage_rank(name: &str) -> (u8, usize) {
    match name {
        "h_emb" => (0, 0),
        "h_out" => (2, 0),
        _ => (1, name[1..].parse().unwrap_or(usize::MAX)),
    }
}

/// Sort key placing blocks in forward order.
fn block_rank(name: &str) -> (u8, usize) {
    match name {
        "pre" => (0, 0),
        "coda" => (2, 0),
        _ => (1, name.trim_start_matches("core").parse().unwrap_or(usize::MAX)),
    }
}

fn write_tensor(dir: &Path, file: &str, sample_id: &str, hash: &str, t: &Tensor<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        (v as f32).write_le(&mut bytes);
    }
    let bin = dir.join(format!("{file}.bin"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let side = Sidecar {
        stage: file.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        sample_id: sample_id.to_string(),
        config_hash: hash.to_string(),
    };
    let json = dir.join(format!("{file}.json"));
    fs::write(&json, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&json, e))
}

pub fn write_sample(root: &Path, sample: &ProbeSample) -> Result<()> {
    let dir = root.join(&sample.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, t) in &sample.stages {
        write_tensor(&dir, name, &sample.id, &sample.config_hash, t)?;
    }
    for (name, a, b) in &sample.blocks {
        write_tensor(&dir, &block_file(name, "in"), &sample.id, &sample.config_hash, a)?;
        write_tensor(&dir, &block_file(name, "out"), &sample.id, &sample.config_hash, b)?;
    }
    Ok(())
}

fn read_tensor(dir: &Path, file: &str) -> Result<(Sidecar, Tensor<f64>)> {
    let json = dir.join(format!("{file}.json"));
    let side: Sidecar =
        serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if side.dtype != "f32" {
        return Err(Error::Data(format!("{}: dtype {} is not f32", json.display(), side.dtype)));
    }
    let bin = dir.join(format!("{file}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: {} bytes but sidecar shape {:?} needs {}",
            bin.display(),
            bytes.len(),
            side.shape,
            n * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect();
    let t = Tensor::new(&side.shape, data)?;
    Ok((side, t))
}

pub fn read_sample(dir: &Path) -> Result<ProbeSample> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("bad sample directory {}", dir.display())))?
        .to_string();
    let mut stage_files = Vec::new();
    let mut block_names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(block) = stem.strip_prefix("block.").and_then(|b| b.strip_suffix(".in")) {
            block_names.push(block.to_string());
        } else if is_stage_name(stem) {
            stage_files.push(stem.to_string());
        } else if !stem.starts_with("block.") {
            return Err(Error::Data(format!("unknown stage name {stem} in {}", dir.display())));
        }
    }
    stage_files.sort_by_key(|s| stage_rank(s));
    block_names.sort_by_key(|s| block_rank(s));
    let mut config_hash = None;
    let mut check = |side: &Sidecar| -> Result<()> {
        if side.sample_id != id {
            return Err(Error::Data(format!(
                "sidecar for {} names sample {} inside {id}",
                side.stage, side.sample_id
            )));
        }
        match &config_hash {
            None => config_hash = Some(side.config_hash.clone()),
            Some(h) if *h != side.config_hash => {
                return Err(Error::Data(format!("mixed config hashes in sample {id}")))
            }
            _ => {}
        }
        Ok(())
    };
    let mut stages = Vec::new();
    for name in stage_files {
        let (side, t) = read_tensor(dir, &name)?;
        check(&side)?;
        stages.push((name, t));
    }
    let mut blocks = Vec::new();
    for name in block_names {
        let (si, a) = read_tensor(dir, &block_file(&name, "in"))?;
        let (so, b) = read_tensor(dir, &block_file(&name, "out"))?;
        check(&si)?;
        check(&so)?;
        blocks.push((name, a, b));
    }
    if stages.is_empty() {
        return Err(Error::Data(format!("no stages in {}", dir.display())));
    }
    Ok(ProbeSample {
        id,
        config_hash: config_hash.unwrap_or_default(),
        stages,
        blocks,
    })
}

/// Every sample below `root`, ordered by directory name.
pub fn read_dump(root: &Path) -> Result<Vec<ProbeSample>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no samples under {}", root.display())));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}

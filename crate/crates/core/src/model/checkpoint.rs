//! Single-file little-endian checkpoint container:
//! magic, u64 manifest length, JSON manifest, raw tensor data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"MESHCKPT";
const FORMAT: &str = "meshloop-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub dtype: Dtype,
    pub params: Vec<ParamEntry>,
    /// Character vocabulary for char-level runs, in id order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<char>>,
    #[serde(default)]
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub vocab: Option<Vec<char>>,
    pub step: u64,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    vocab: Option<&[char]>,
    step: u64,
) -> Result<()> {
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.cfg.clone(),
        dtype: T::DTYPE,
        params: model
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        vocab: vocab.map(<[char]>::to_vec),
        step,
    };
    let json = serde_json::to_vec(&manifest)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = Vec::with_capacity(model.params.count() * T::DTYPE.size_of());
    for t in model.params.tensors() {
        for &x in t.data() {
            x.write_le(&mut body);
        }
    }
    w.write_all(MAGIC)
        .and_then(|_| w.write_all(&(json.len() as u64).to_le_bytes()))
        .and_then(|_| w.write_all(&json))
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Manifest> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(path, &mut BufReader::new(file))
}

fn read_tensors<S: Scalar>(path: &Path, r: &mut impl Read, manifest: &Manifest) -> Result<ParamStore<S>> {
    let mut store = ParamStore::default();
    let width = S::DTYPE.size_of();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * width];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let data = bytes.chunks_exact(width).map(S::read_le).collect();
        store.push(entry.name.clone(), Tensor::new(&entry.shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Data("trailing bytes after checkpoint data".into()));
    }
    Ok(store)
}

/// Loads a checkpoint, converting parameters to `T` if they were stored in
/// the other precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let manifest = read_header(path, &mut r)?;
    let params: ParamStore<T> = match manifest.dtype {
        Dtype::F32 => read_tensors::<f32>(path, &mut r, &manifest)?.cast(),
        Dtype::F64 => read_tensors::<f64>(path, &mut r, &manifest)?.cast(),
    };
    let model = Model::from_params(manifest.config.clone(), params)?;
    Ok(Checkpoint {
        model,
        vocab: manifest.vocab,
        step: manifest.step,
    })
}

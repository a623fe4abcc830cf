//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `GLKSCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! as little-endian `f32` values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::RESERVED;
use crate::data::Vocabulary;
use crate::error::{GlksError, Result};
use crate::model::{Glks, ModelConfig};
use crate::tensor::{Scalar, Tensor};
use crate::train::trainer::{EpochRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"GLKSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    /// Vocabulary without the reserved tokens, in id order.
    vocab: Vec<String>,
    epoch: Option<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: Glks<f32>,
    pub vocab: Vocabulary,
    pub train: Option<TrainConfig>,
    pub epoch: Option<EpochRecord>,
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Glks<T>,
    vocab: &Vocabulary,
    train: Option<&TrainConfig>,
    epoch: Option<&EpochRecord>,
) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(GlksError::Checkpoint(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let header = Header {
        model: model.config.clone(),
        train: train.cloned(),
        vocab: vocab.tokens()[RESERVED.len()..].to_vec(),
        epoch: epoch.cloned(),
        tensors: model
            .params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.params.iter() {
        for &v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| {
        GlksError::Checkpoint(format!(
            "{} is too short to be a checkpoint",
            path.display()
        ))
    })?;
    if &magic != MAGIC {
        return Err(GlksError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(GlksError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    let vocab = Vocabulary::from_tokens(header.vocab.iter().cloned())?;
    if vocab.len() != header.model.vocab_size {
        return Err(GlksError::Checkpoint(format!(
            "checkpoint vocabulary has {} entries but its model expects {}",
            vocab.len(),
            header.model.vocab_size
        )));
    }
    // Parameter values are overwritten below; the generator only fixes layout.
    let mut model: Glks<f32> = Glks::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.params.len() != header.tensors.len() {
        return Err(GlksError::Checkpoint(format!(
            "checkpoint has {} tensors, model layout has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (entry, id) in header.tensors.iter().zip(ids) {
        let p = model.params.get_mut(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(GlksError::Checkpoint(format!(
                "tensor `{}` {:?} does not match model parameter `{}` {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw).map_err(|_| {
            GlksError::Checkpoint(format!("truncated data for tensor `{}`", entry.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.value = Tensor::new(entry.shape.clone(), data)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(GlksError::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            rest.len()
        )));
    }
    Ok(Checkpoint {
        model,
        vocab,
        train: header.train,
        epoch: header.epoch,
    })
}

//! JSON model checkpoints.
//!
//! ```text
//! {
//!   "format": "replik-model",
//!   "version": 1,
//!   "scalar": "f32",
//!   "seed": 7,
//!   "step": 1880,
//!   "config": { ModelConfig fields },
//!   "vocab": { "v": {name: id}, "d": {...}, "j": {...} },
//!   "tensors": [ { "name": "aa_embedding", "shape": [21, 16], "data": [...] }, ... ]
//! }
//! ```
//!
//! Tensors are row-major and listed in storage order. Optimizer moments are
//! not stored; a loaded model starts with zero moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneVocabs;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{init_params, ModelConfig, ModelState};

const FORMAT: &str = "replik-model";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord<T> {
    name: String,
    shape: [usize; 2],
    data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
struct CheckpointFile<T> {
    format: String,
    version: u32,
    scalar: String,
    seed: u64,
    step: u64,
    config: ModelConfig,
    vocab: GeneVocabs,
    tensors: Vec<TensorRecord<T>>,
}

/// A model together with the gene vocabulary its embedding rows refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub state: ModelState<T>,
    pub vocab: GeneVocabs,
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, vocab: &GeneVocabs, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        scalar: T::NAME.into(),
        seed: state.seed,
        step: state.step,
        config: state.config.clone(),
        vocab: vocab.clone(),
        tensors: state
            .layout
            .tensors()
            .map(|(name, slot)| TensorRecord {
                name: name.to_owned(),
                shape: [slot.rows, slot.cols],
                data: state.params[slot.range()].to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile<T> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    let mut state = init_params::<T>(&file.config, file.seed)?;
    let expected: Vec<(String, [usize; 2])> = state
        .layout
        .tensors()
        .map(|(n, s)| (n.to_owned(), [s.rows, s.cols]))
        .collect();
    if expected.len() != file.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            expected.len(),
            file.tensors.len()
        )));
    }
    let mut offset = 0;
    for ((name, shape), t) in expected.iter().zip(&file.tensors) {
        if *name != t.name || *shape != t.shape || t.data.len() != shape[0] * shape[1] {
            return Err(Error::Checkpoint(format!(
                "{}: tensor `{}` does not match the configured architecture",
                path.display(),
                t.name
            )));
        }
        state.params[offset..offset + t.data.len()].copy_from_slice(&t.data);
        offset += t.data.len();
    }
    state.step = file.step;
    Ok(Checkpoint {
        state,
        vocab: file.vocab,
    })
}

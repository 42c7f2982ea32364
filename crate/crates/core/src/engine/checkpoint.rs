//! Single-file checkpoint: one JSON header line, then every tensor as
//! little-endian `f64` values in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHead, PredilectionMatrix};
use crate::encoders::{Encoder, Modality, TextVocabulary};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, TENSOR_NAMES};

use super::config::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    /// Names of the classes seen in training.
    pub classes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    hyperparameters: TrainConfig,
    rng_seed: u64,
    n: usize,
    d: usize,
    classes: Vec<String>,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the payload.
    offset: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: Model, classes: Vec<String>) -> Self {
        Self { config, model, classes }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::new();
        for (name, t) in self.model.tensors() {
            entries.push(TensorEntry {
                name: name.to_owned(),
                shape: [t.rows(), t.cols()],
                offset,
            });
            offset += t.data().len() * 8;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            hyperparameters: self.config.clone(),
            rng_seed: self.config.seed,
            n: self.model.n(),
            d: self.model.d(),
            classes: self.classes.clone(),
            vocabulary: self.model.vocab.tokens().to_vec(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset);
        for (_, t) in self.model.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &bytes[split + 1..];
        let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != TENSOR_NAMES {
            return Err(bad(format!("tensor directory {names:?} does not match {TENSOR_NAMES:?}")));
        }
        let (n, d, v) = (header.n, header.d, header.vocabulary.len());
        let expected = [[d, d], [1, d], [d, d], [1, d], [v, d], [n, d], [d, d], [d, d], [d, d]];
        let mut tensors = Vec::with_capacity(9);
        let mut cursor = 0;
        for (entry, shape) in header.tensors.iter().zip(expected) {
            if entry.shape != shape {
                return Err(bad(format!("{} has shape {:?}, expected {:?}", entry.name, entry.shape, shape)));
            }
            if entry.offset != cursor {
                return Err(bad(format!("{} starts at byte {}, expected {cursor}", entry.name, entry.offset)));
            }
            let len = shape[0] * shape[1] * 8;
            let chunk = payload
                .get(cursor..cursor + len)
                .ok_or_else(|| bad(format!("payload truncated in {}", entry.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Matrix::new(shape[0], shape[1], data).map_err(|e| bad(e.to_string()))?);
            cursor += len;
        }
        if cursor != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - cursor)));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("nine tensors");
        let fundus = Encoder::new(Modality::Fundus, next(), next())?;
        let oct = Encoder::new(Modality::Oct, next(), next())?;
        let vocab = TextVocabulary::from_parts(header.vocabulary, next())?;
        let predilection = PredilectionMatrix::new(next());
        let head = AttentionHead::new(next(), next(), next())?;
        Ok(Self {
            config: header.hyperparameters,
            model: Model {
                fundus,
                oct,
                vocab,
                predilection,
                head,
            },
            classes: header.classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

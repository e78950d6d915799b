//! Checkpoint file: `ZZCKPT\n`, one JSON header line, then every matrix as
//! row-major little-endian f64 in header order. The order is the weight
//! order of `ToyDenoiserWeights::named_params` followed by
//! `vocab.embeddings` and `vocab.null`.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelDims, ToyDenoiserWeights};
use crate::error::{Error, Result};
use crate::prompt::PromptVocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "ZZCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layers: usize,
    timesteps: usize,
    dims: ModelDims,
    vocab_tokens: Vec<String>,
    vocab_subject: Vec<bool>,
    matrices: Vec<MatrixHeader>,
    /// Free-form provenance (e.g. the training configuration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    name: String,
    rows: usize,
    cols: usize,
}

/// Weights, vocabulary and optional metadata as stored on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: ToyDenoiserWeights,
    pub vocab: PromptVocabulary,
    pub metadata: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.weights, &self.vocab, self.metadata.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(f)
    }

    pub fn read(reader: impl Read) -> Result<Self> {
        decode(reader)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn checkpoint_bytes(weights: &ToyDenoiserWeights, vocab: &PromptVocabulary) -> Vec<u8> {
    encode(weights, vocab, None)
}

fn encode(weights: &ToyDenoiserWeights, vocab: &PromptVocabulary, metadata: Option<serde_json::Value>) -> Vec<u8> {
    let null = vocab.null_embedding().view().insert_axis(ndarray::Axis(0)).to_owned();
    let mut mats: Vec<(String, &Array2<f64>)> = weights.named_params();
    mats.push(("vocab.embeddings".into(), vocab.embeddings()));
    mats.push(("vocab.null".into(), &null));
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        layers: weights.dims.layers,
        timesteps: weights.dims.timesteps,
        dims: weights.dims,
        vocab_tokens: vocab.tokens().to_vec(),
        vocab_subject: vocab.subject_flags().to_vec(),
        matrices: mats
            .iter()
            .map(|(name, m)| MatrixHeader {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        metadata,
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for (_, m) in &mats {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, weights: &ToyDenoiserWeights, vocab: &PromptVocabulary) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(weights, vocab)).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(weights: &ToyDenoiserWeights, vocab: &PromptVocabulary) -> String {
    hex::encode(Sha256::digest(checkpoint_bytes(weights, vocab)))
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyDenoiserWeights, PromptVocabulary)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}

pub fn read_checkpoint(reader: impl Read) -> Result<(ToyDenoiserWeights, PromptVocabulary)> {
    decode(reader).map(|c| (c.weights, c.vocab))
}

fn decode(reader: impl Read) -> Result<Checkpoint> {
    let what = "checkpoint";
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::format(what, e.to_string()))?;
    if line.trim_end() != MAGIC {
        return Err(Error::format(what, "bad magic"));
    }
    line.clear();
    reader.read_line(&mut line).map_err(|e| Error::format(what, e.to_string()))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::format(what, e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(what, format!("unsupported version {}", header.format_version)));
    }
    if header.layers != header.dims.layers || header.timesteps != header.dims.timesteps {
        return Err(Error::format(what, "header layer/timestep counts disagree with dims"));
    }
    let mut weights = ToyDenoiserWeights::zeros(header.dims)?;
    let n_weights = weights.named_params().len();
    if header.matrices.len() != n_weights + 2 {
        return Err(Error::format(what, "unexpected matrix count"));
    }
    let mut read = |mh: &MatrixHeader| -> Result<Array2<f64>> {
        let mut buf = vec![0u8; mh.rows * mh.cols * 8];
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::format(what, format!("truncated payload in {}: {e}", mh.name)))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Array2::from_shape_vec((mh.rows, mh.cols), data).map_err(|e| Error::format(what, e.to_string()))
    };
    let expected: Vec<String> = weights.named_params().into_iter().map(|(n, _)| n).collect();
    let mut loaded = Vec::with_capacity(n_weights);
    for (mh, want) in header.matrices[..n_weights].iter().zip(&expected) {
        if &mh.name != want {
            return Err(Error::format(what, format!("expected matrix {want}, found {}", mh.name)));
        }
        loaded.push(read(mh)?);
    }
    for (dst, src) in weights.params_mut().into_iter().zip(loaded) {
        if dst.dim() != src.dim() {
            return Err(Error::format(what, "matrix shape disagrees with dims"));
        }
        *dst = src;
    }
    let emb = read(&header.matrices[n_weights])?;
    let null = read(&header.matrices[n_weights + 1])?;
    weights.check()?;
    let vocab = PromptVocabulary::new(
        header.vocab_tokens,
        header.vocab_subject,
        emb,
        Array1::from_iter(null.iter().copied()),
    )?;
    let mut rest = [0u8; 1];
    if reader.read(&mut rest).map_err(|e| Error::format(what, e.to_string()))? != 0 {
        return Err(Error::format(what, "trailing bytes after payload"));
    }
    Ok(Checkpoint {
        weights,
        vocab,
        metadata: header.metadata,
    })
}

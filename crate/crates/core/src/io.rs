//! Candidate files and checkpoints.
//!
//! A candidate file holds one JSON object per line:
//!
//! ```text
//! {"query_id": "q1", "query_embedding": [...],
//!  "candidates": [{"passage_id": "p", "doc_key": "d", "chunk_index": 0,
//!                  "embedding": [...], "relevance": 1}, ...],
//!  "gold": {...}}
//! ```
//!
//! `relevance` and `gold` are optional; `gold` is only used for training,
//! where it names a positive that may be missing from the retrieved list.
//!
//! A checkpoint is little-endian binary:
//!
//! ```text
//! magic "CTXRKCPT" | u32 version | u32 len + model config (TOML text)
//! | u32 tensor count | per tensor: u16 len + name, u8 ndim, u32 dims, f32 data
//! | u32 CRC-32 of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayViewMutD;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{CandidateSet, EmbeddingVec, PassageRecord};
use crate::encoder::{ModelWeights, Params};
use crate::error::{CheckpointError, Error, Result};
use crate::real::Real;

/// One line of a candidate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub query_id: String,
    pub query_embedding: EmbeddingVec,
    pub candidates: Vec<PassageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PassageRecord>,
}

impl CandidateRecord {
    pub fn from_set(set: &CandidateSet) -> Self {
        Self {
            query_id: set.query_id.clone(),
            query_embedding: set.query_embedding.clone(),
            candidates: set.candidates.clone(),
            gold: None,
        }
    }

    fn into_set(self, k_max: usize) -> Result<CandidateSet> {
        CandidateSet::new(self.query_id, self.query_embedding, self.candidates, k_max)
    }
}

/// Streams validated records from a candidate file.
///
/// The embedding dimension is fixed by `dim` or, when `None`, by the first
/// record; every later record must match it.
pub struct CandidateReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
    dim: Option<usize>,
    k_max: usize,
}

impl CandidateReader<BufReader<File>> {
    pub fn open(path: &Path, dim: Option<usize>, k_max: usize) -> Result<Self> {
        let file = File::open(path)?;
        Ok(Self::new(BufReader::new(file), path, dim, k_max))
    }
}

impl<R: BufRead> CandidateReader<R> {
    pub fn new(reader: R, path: &Path, dim: Option<usize>, k_max: usize) -> Self {
        Self {
            lines: reader.lines(),
            path: path.to_path_buf(),
            line: 0,
            dim,
            k_max,
        }
    }

    fn at_line(&self, source: Error) -> Error {
        Error::InRecord {
            path: self.path.clone(),
            line: self.line,
            source: Box::new(source),
        }
    }

    fn check(&mut self, record: &CandidateRecord) -> Result<()> {
        let dim = *self.dim.get_or_insert(record.query_embedding.dim());
        record.query_embedding.expect_dim(dim, "query embedding")?;
        for (i, c) in record.candidates.iter().chain(&record.gold).enumerate() {
            c.embedding.expect_dim(
                dim,
                &format!("embedding of passage {i} (`{}`)", c.passage_id),
            )?;
        }
        Ok(())
    }

    /// Next record with dimension checks but no candidate-count limit.
    pub fn next_record(&mut self) -> Option<Result<CandidateRecord>> {
        loop {
            let line = self.lines.next()?;
            self.line += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let record: CandidateRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        path: self.path.clone(),
                        line: self.line,
                        message: e.to_string(),
                    }))
                }
            };
            return Some(match self.check(&record) {
                Ok(()) => Ok(record),
                Err(e) => Err(self.at_line(e)),
            });
        }
    }
}

impl<R: BufRead> Iterator for CandidateReader<R> {
    type Item = Result<CandidateSet>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = match self.next_record()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let k_max = self.k_max;
        Some(record.into_set(k_max).map_err(|e| self.at_line(e)))
    }
}

pub fn load_candidates(path: &Path, dim: Option<usize>, k_max: usize) -> Result<Vec<CandidateSet>> {
    CandidateReader::open(path, dim, k_max)?.collect()
}

/// Records for training, where the retrieved list may be completed by `gold`.
pub fn load_training_records(path: &Path, dim: Option<usize>) -> Result<Vec<CandidateRecord>> {
    let mut reader = CandidateReader::open(path, dim, usize::MAX)?;
    std::iter::from_fn(|| reader.next_record()).collect()
}

pub fn write_candidates<W: Write>(mut out: W, records: &[CandidateRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTXRKCPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writer that feeds every byte through a CRC-32 hasher.
struct Checksummed<W> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> Checksummed<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hasher.update(bytes);
        self.inner.write_all(bytes)
    }
}

pub fn save_checkpoint<F: Real>(weights: &ModelWeights<F>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut out = Checksummed {
        inner: BufWriter::new(file),
        hasher: crc32fast::Hasher::new(),
    };
    out.put(CHECKPOINT_MAGIC)?;
    out.put(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = weights.config.to_toml();
    out.put(&(config.len() as u32).to_le_bytes())?;
    out.put(config.as_bytes())?;

    let tensors = weights.params.tensors();
    out.put(&(tensors.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for (name, t) in &tensors {
        out.put(&(name.len() as u16).to_le_bytes())?;
        out.put(name.as_bytes())?;
        out.put(&[t.ndim() as u8])?;
        for &d in t.shape() {
            out.put(&(d as u32).to_le_bytes())?;
        }
        buf.clear();
        buf.reserve(t.len() * 4);
        for v in t.iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.put(&buf)?;
    }
    let crc = out.hasher.clone().finalize();
    out.inner.write_all(&crc.to_le_bytes())?;
    out.inner.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

struct RawTensor<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [u8],
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ModelWeights<F>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires its config to equal `expected` in every
/// shape-determining field.
pub fn load_checkpoint_expecting<F: Real>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelWeights<F>> {
    let weights = load_checkpoint::<F>(path)?;
    let found = &weights.config;
    let pairs = [
        ("dim", found.dim, expected.dim),
        ("layers", found.layers, expected.layers),
        ("heads", found.heads, expected.heads),
        ("ffn_dim", found.ffn_dim, expected.ffn_dim),
        ("k_max", found.k_max, expected.k_max),
    ];
    for (name, f, e) in pairs {
        if f != e {
            return Err(CheckpointError::ConfigMismatch(format!(
                "checkpoint has {name} = {f}, expected {e}"
            ))
            .into());
        }
    }
    Ok(weights)
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<ModelWeights<F>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let config_len = cur.u32()? as usize;
    let config_bytes = cur.take(config_len)?;

    let count = cur.u32()? as usize;
    let mut raw = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let data = cur.take(len.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        raw.push(RawTensor { name, shape, data });
    }
    let body_end = cur.pos;
    let stored = cur.u32()?;
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - cur.pos
        ))
        .into());
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }

    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
    let config = ModelConfig::from_toml(config_text)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut params = Params::<F>::zeros(&config);
    let mut slots = params.tensors_mut();
    if slots.len() != raw.len() {
        return Err(CheckpointError::Malformed(format!(
            "config implies {} tensors, file has {}",
            slots.len(),
            raw.len()
        ))
        .into());
    }
    for ((name, slot), tensor) in slots.iter_mut().zip(&raw) {
        fill_tensor(name, slot, tensor)?;
    }
    drop(slots);
    Ok(ModelWeights { config, params })
}

fn fill_tensor<F: Real>(
    name: &str,
    slot: &mut ArrayViewMutD<'_, F>,
    tensor: &RawTensor<'_>,
) -> Result<(), CheckpointError> {
    if tensor.name != name {
        return Err(CheckpointError::Malformed(format!(
            "expected tensor `{name}`, found `{}`",
            tensor.name
        )));
    }
    if tensor.shape != slot.shape() {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected: slot.shape().to_vec(),
            found: tensor.shape.clone(),
        });
    }
    for (dst, chunk) in slot.iter_mut().zip(tensor.data.chunks_exact(4)) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(CheckpointError::Malformed(format!(
                "non-finite value in `{name}`"
            )));
        }
        *dst = F::lit(v as f64);
    }
    Ok(())
}

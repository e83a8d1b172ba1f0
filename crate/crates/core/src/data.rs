//! Embedding, candidate and mask types, plus the structural enrichment that
//! turns retrieved candidates into encoder inputs.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, ArrayView2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Additive value standing in for negative infinity in attention masks.
///
/// Finite so that max-subtracted softmax never computes `-inf - -inf`;
/// masked weights still underflow to exactly zero.
pub const MASKED: f64 = -1e9;

/// A query or passage vector in the retriever's embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding component {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub(crate) fn expect_dim(&self, dim: usize, context: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: context.to_string(),
                expected: dim,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVec> for Vec<f64> {
    fn from(v: EmbeddingVec) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub passage_id: String,
    pub doc_key: String,
    /// 0-based position of the passage among its document's chunks.
    pub chunk_index: usize,
    pub embedding: EmbeddingVec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<u32>,
}

impl PassageRecord {
    pub fn new(
        passage_id: impl Into<String>,
        doc_key: impl Into<String>,
        chunk_index: usize,
        embedding: EmbeddingVec,
    ) -> Self {
        Self {
            passage_id: passage_id.into(),
            doc_key: doc_key.into(),
            chunk_index,
            embedding,
            relevance: None,
        }
    }

    pub fn with_relevance(mut self, relevance: u32) -> Self {
        self.relevance = Some(relevance);
        self
    }

    pub fn is_relevant(&self) -> bool {
        self.relevance.unwrap_or(0) > 0
    }
}

/// A query and its retrieved candidates, validated against `k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub query_embedding: EmbeddingVec,
    pub candidates: Vec<PassageRecord>,
}

impl CandidateSet {
    pub fn new(
        query_id: impl Into<String>,
        query_embedding: EmbeddingVec,
        candidates: Vec<PassageRecord>,
        k_max: usize,
    ) -> Result<Self> {
        let set = Self {
            query_id: query_id.into(),
            query_embedding,
            candidates,
        };
        set.validate(k_max)?;
        Ok(set)
    }

    /// Checks size limits, uniform dimension and `(doc_key, chunk_index)` uniqueness.
    pub fn validate(&self, k_max: usize) -> Result<()> {
        check_candidates(&self.candidates, k_max)?;
        let dim = self.query_embedding.dim();
        for (i, c) in self.candidates.iter().enumerate() {
            c.embedding
                .expect_dim(dim, &format!("candidate {i} of query `{}`", self.query_id))?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.query_embedding.dim()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

pub(crate) fn check_candidates(candidates: &[PassageRecord], k_max: usize) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if candidates.len() > k_max {
        return Err(Error::CandidateOverflow {
            count: candidates.len(),
            k_max,
        });
    }
    let mut seen = HashSet::with_capacity(candidates.len());
    for c in candidates {
        if !seen.insert((c.doc_key.as_str(), c.chunk_index)) {
            return Err(Error::DuplicatePassage {
                doc_key: c.doc_key.clone(),
                chunk_index: c.chunk_index,
            });
        }
    }
    Ok(())
}

/// Assignment of the documents present in one candidate set to slot indices
/// of the document embedding table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocSlotMap {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl DocSlotMap {
    /// The i-th distinct `doc_key` in candidate order gets slot i.
    pub fn build(candidates: &[PassageRecord]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        Ok(Self::from_keys(
            candidates.iter().map(|c| c.doc_key.as_str()),
        ))
    }

    /// Builds a map from keys in the given order, skipping repeats.
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a str>) -> Self {
        let mut map = Self {
            keys: Vec::new(),
            index: HashMap::new(),
        };
        for key in keys {
            if !map.index.contains_key(key) {
                map.index.insert(key.to_string(), map.keys.len());
                map.keys.push(key.to_string());
            }
        }
        map
    }

    pub fn slot(&self, doc_key: &str) -> Option<usize> {
        self.index.get(doc_key).copied()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Slot of each candidate, checked against the table size.
    pub(crate) fn slots_for(
        &self,
        candidates: &[PassageRecord],
        k_max: usize,
    ) -> Result<Vec<usize>> {
        candidates
            .iter()
            .map(|c| {
                let slot = self
                    .slot(&c.doc_key)
                    .ok_or_else(|| Error::UnknownDocument(c.doc_key.clone()))?;
                if slot >= k_max {
                    return Err(Error::SlotOutOfRange { slot, k_max });
                }
                Ok(slot)
            })
            .collect()
    }
}

/// Additive `(k+1) x (k+1)` mask for the document-restricted attention module.
///
/// Index 0 is the query; indices `1..=k` are passages in candidate order.
/// Entry `(i, j)` is open when `j` is the query, when `i` is the query, or when
/// passages `i` and `j` share a document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    open: Vec<bool>,
}

impl AttentionMask {
    pub fn build(candidates: &[PassageRecord]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let size = candidates.len() + 1;
        let mut open = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                open[i * size + j] =
                    i == 0 || j == 0 || candidates[i - 1].doc_key == candidates[j - 1].doc_key;
            }
        }
        Ok(Self { size, open })
    }

    /// A mask with every entry open (single-document degenerate case).
    pub fn full(size: usize) -> Self {
        Self {
            size,
            open: vec![true; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.open[i * self.size + j]
    }

    /// Additive value at `(i, j)`: 0 or [`MASKED`].
    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.is_open(i, j) {
            0.0
        } else {
            MASKED
        }
    }

    pub fn to_array<F: Real>(&self) -> Array2<F> {
        Array2::from_shape_fn((self.size, self.size), |(i, j)| F::lit(self.value(i, j)))
    }
}

/// Standard sinusoidal encoding of a chunk position.
///
/// Component `2i` is `sin(pos / 10000^(2i/d))`, component `2i+1` the matching cosine.
pub fn sinusoidal_position_encoding(chunk_index: usize, dim: usize) -> EmbeddingVec {
    let mut out = vec![0.0; dim];
    write_position_encoding(chunk_index, &mut out);
    EmbeddingVec(out)
}

fn write_position_encoding(chunk_index: usize, out: &mut [f64]) {
    let dim = out.len() as f64;
    let pos = chunk_index as f64;
    for pair in 0..out.len().div_ceil(2) {
        let angle = pos / 10000f64.powf((2 * pair) as f64 / dim);
        out[2 * pair] = angle.sin();
        if 2 * pair + 1 < out.len() {
            out[2 * pair + 1] = angle.cos();
        }
    }
}

/// `p + doc_table[slot] + pos(chunk_index)`. The query is never enriched.
pub fn enrich(
    record: &PassageRecord,
    slot_map: &DocSlotMap,
    doc_table: ArrayView2<'_, f64>,
) -> Result<EmbeddingVec> {
    let dim = doc_table.ncols();
    record.embedding.expect_dim(dim, "enriched passage")?;
    let slot = slot_map
        .slot(&record.doc_key)
        .ok_or_else(|| Error::UnknownDocument(record.doc_key.clone()))?;
    if slot >= doc_table.nrows() {
        return Err(Error::SlotOutOfRange {
            slot,
            k_max: doc_table.nrows(),
        });
    }
    let mut out = ndarray::Array1::zeros(dim);
    write_enriched(out.view_mut(), record, slot, doc_table, true);
    Ok(EmbeddingVec(out.to_vec()))
}

/// Writes the (optionally enriched) passage vector into `row`.
pub(crate) fn write_enriched<F: Real>(
    mut row: ArrayViewMut1<'_, F>,
    record: &PassageRecord,
    slot: usize,
    doc_table: ArrayView2<'_, F>,
    positional: bool,
) {
    let raw = record.embedding.as_slice();
    if !positional {
        row.iter_mut().zip(raw).for_each(|(r, &v)| *r = F::lit(v));
        return;
    }
    let mut pos = vec![0.0; raw.len()];
    write_position_encoding(record.chunk_index, &mut pos);
    let doc = doc_table.row(slot);
    for (i, r) in row.iter_mut().enumerate() {
        // Sum in f64 first so f32 and f64 inputs agree up to one rounding.
        *r = F::lit(raw[i] + pos[i]) + doc[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn passage(doc: &str, chunk: usize, emb: Vec<f64>) -> PassageRecord {
        PassageRecord::new(
            format!("{doc}-{chunk}"),
            doc,
            chunk,
            EmbeddingVec::new(emb).unwrap(),
        )
    }

    fn docs(keys: &[&str]) -> Vec<PassageRecord> {
        keys.iter()
            .enumerate()
            .map(|(i, k)| passage(k, i, vec![0.0; 4]))
            .collect()
    }

    #[test]
    fn embedding_rejects_nan() {
        assert!(matches!(
            EmbeddingVec::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(EmbeddingVec::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn slot_map_first_appearance() {
        let m = DocSlotMap::build(&docs(&["X", "Y", "X"])).unwrap();
        assert_eq!((m.slot("X"), m.slot("Y")), (Some(0), Some(1)));
        assert_eq!(m.len(), 2);

        let m = DocSlotMap::build(&docs(&["A"])).unwrap();
        assert_eq!(m.slot("A"), Some(0));

        let m = DocSlotMap::build(&docs(&["C", "B", "A", "B"])).unwrap();
        assert_eq!(m.keys(), ["C", "B", "A"]);
    }

    #[test]
    fn slot_map_stable_when_appending_seen_documents() {
        let mut c = docs(&["C", "B", "A"]);
        let before = DocSlotMap::build(&c).unwrap();
        c.push(passage("B", 99, vec![0.0; 4]));
        assert_eq!(DocSlotMap::build(&c).unwrap(), before);
    }

    #[test]
    fn slot_map_empty_is_error() {
        assert!(matches!(
            DocSlotMap::build(&[]),
            Err(Error::EmptyCandidates)
        ));
    }

    #[test]
    fn mask_two_documents() {
        let m = AttentionMask::build(&docs(&["A", "A", "B"])).unwrap();
        let n = MASKED;
        let expected = [
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, n],
            [0.0, 0.0, 0.0, n],
            [0.0, n, n, 0.0],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(m.value(i, j), v, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_single_document_is_all_open() {
        let m = AttentionMask::build(&docs(&["A", "A", "A"])).unwrap();
        assert_eq!(m, AttentionMask::full(4));
    }

    #[test]
    fn mask_distinct_documents() {
        let m = AttentionMask::build(&docs(&["A", "B", "C"])).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(m.is_open(i, j), i == j);
            }
            assert!(m.is_open(i, 0) && m.is_open(0, i));
        }
    }

    #[test]
    fn position_encoding_at_zero_alternates() {
        let p = sinusoidal_position_encoding(0, 6);
        assert_eq!(p.as_slice(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_encoding_known_values() {
        let p = sinusoidal_position_encoding(1, 4);
        let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p.as_slice()[0], 0.8415, epsilon = 1e-4);
        assert_abs_diff_eq!(p.as_slice()[3], 0.99995, epsilon = 1e-4);
    }

    #[test]
    fn position_encoding_odd_dimension() {
        let p = sinusoidal_position_encoding(3, 5);
        assert_eq!(p.dim(), 5);
        assert_abs_diff_eq!(
            p.as_slice()[4],
            (3.0 / 10000f64.powf(0.8)).sin(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn enrich_zero_inputs_leaves_position_only() {
        let table = Array2::zeros((4, 6));
        let rec = passage("A", 0, vec![0.0; 6]);
        let map = DocSlotMap::build(std::slice::from_ref(&rec)).unwrap();
        let e = enrich(&rec, &map, table.view()).unwrap();
        assert_eq!(e.as_slice(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn enrich_is_additive() {
        let table = Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let recs = vec![
            passage("B", 5, vec![0.0; 4]),
            passage("A", 0, vec![1.0, -2.0, 0.5, 3.0]),
        ];
        let map = DocSlotMap::build(&recs).unwrap();
        let e = enrich(&recs[1], &map, table.view()).unwrap();
        let pos = sinusoidal_position_encoding(0, 4);
        for j in 0..4 {
            let expected = recs[1].embedding.as_slice()[j] + table[[1, j]] + pos.as_slice()[j];
            assert_abs_diff_eq!(e.as_slice()[j], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn same_document_chunks_differ_by_position_only() {
        let table = Array2::from_shape_fn((3, 8), |(i, j)| ((i + 1) * (j + 2)) as f64 * 0.03);
        let emb = vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.0, 0.4];
        let recs = vec![passage("D", 3, emb.clone()), passage("D", 7, emb)];
        let map = DocSlotMap::build(&recs).unwrap();
        let a = enrich(&recs[0], &map, table.view()).unwrap();
        let b = enrich(&recs[1], &map, table.view()).unwrap();
        let pa = sinusoidal_position_encoding(3, 8);
        let pb = sinusoidal_position_encoding(7, 8);
        for j in 0..8 {
            let diff = a.as_slice()[j] - b.as_slice()[j];
            assert_abs_diff_eq!(diff, pa.as_slice()[j] - pb.as_slice()[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn enrich_unknown_document() {
        let table = Array2::zeros((2, 4));
        let map = DocSlotMap::from_keys(["A"]);
        let rec = passage("Z", 0, vec![0.0; 4]);
        assert!(matches!(
            enrich(&rec, &map, table.view()),
            Err(Error::UnknownDocument(k)) if k == "Z"
        ));
    }

    #[test]
    fn candidate_set_validation() {
        let q = EmbeddingVec::zeros(4);
        let ok = CandidateSet::new("q", q.clone(), docs(&["A", "B"]), 20);
        assert!(ok.is_ok());

        let dup = vec![passage("A", 1, vec![0.0; 4]), passage("A", 1, vec![1.0; 4])];
        assert!(matches!(
            CandidateSet::new("q", q.clone(), dup, 20),
            Err(Error::DuplicatePassage { chunk_index: 1, .. })
        ));

        let bad_dim = vec![passage("A", 0, vec![0.0; 3])];
        assert!(matches!(
            CandidateSet::new("q", q.clone(), bad_dim, 20),
            Err(Error::DimensionMismatch {
                expected: 4,
                found: 3,
                ..
            })
        ));

        let many: Vec<_> = (0..25).map(|i| passage("A", i, vec![0.0; 4])).collect();
        assert!(matches!(
            CandidateSet::new("q", q, many, 20),
            Err(Error::CandidateOverflow {
                count: 25,
                k_max: 20
            })
        ));
    }
}

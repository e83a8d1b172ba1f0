//! Scoring and reordering candidate sets with a trained model.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{CandidateSet, DocSlotMap, EmbeddingVec, PassageRecord};
use crate::encoder::{encode_passages, ModelWeights};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// A permutation of one query's candidates, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }
}

/// `s_i = q . p_hat_i` with the raw query embedding.
pub fn score<F: Real>(
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    weights: &ModelWeights<F>,
) -> Result<Vec<f64>> {
    let slot_map = DocSlotMap::build(candidates)?;
    score_with_slots(query, candidates, &slot_map, weights)
}

pub fn score_with_slots<F: Real>(
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    slot_map: &DocSlotMap,
    weights: &ModelWeights<F>,
) -> Result<Vec<f64>> {
    let passages = encode_passages(query, candidates, slot_map, weights)?;
    let q = query.as_slice();
    Ok(passages
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(q).map(|(&p, &q)| p.as_f64() * q).sum())
        .collect())
}

/// Sorts candidates by descending score; ties keep the input order.
pub fn rank_by_scores(query_id: &str, candidates: &[PassageRecord], scores: &[f64]) -> RankedList {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    RankedList {
        query_id: query_id.to_string(),
        entries: order
            .into_iter()
            .enumerate()
            .map(|(r, i)| RankedEntry {
                passage_id: candidates[i].passage_id.clone(),
                score: scores[i],
                rank: r + 1,
            })
            .collect(),
    }
}

pub fn rerank<F: Real>(
    query_id: &str,
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    weights: &ModelWeights<F>,
) -> Result<RankedList> {
    let scores = score(query, candidates, weights)?;
    Ok(rank_by_scores(query_id, candidates, &scores))
}

pub fn rerank_set<F: Real>(set: &CandidateSet, weights: &ModelWeights<F>) -> Result<RankedList> {
    rerank(
        &set.query_id,
        &set.query_embedding,
        &set.candidates,
        weights,
    )
}

/// Reranks many sets concurrently; output order follows input order.
pub fn rerank_batch<F: Real>(
    sets: &[CandidateSet],
    weights: &ModelWeights<F>,
) -> Result<Vec<RankedList>> {
    sets.par_iter().map(|s| rerank_set(s, weights)).collect()
}

/// Writes six-column run lines: `query_id Q0 passage_id rank score tag`.
///
/// Scores use Rust's shortest round-trip formatting, so parsing them back
/// yields the identical `f64`.
pub fn write_run<W: Write>(mut out: W, lists: &[RankedList], tag: &str) -> io::Result<()> {
    for list in lists {
        for e in &list.entries {
            writeln!(
                out,
                "{} Q0 {} {} {} {}",
                list.query_id, e.passage_id, e.rank, e.score, tag
            )?;
        }
    }
    out.flush()
}

/// Parses a run file. Queries keep first-appearance order; entries are sorted by rank.
pub fn read_run<R: BufRead>(input: R, path: &Path) -> Result<Vec<RankedList>> {
    let mut lists: Vec<RankedList> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(format!(
                "expected 6 fields, found {}",
                fields.len()
            )));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("bad rank `{}`", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(format!("bad score `{}`", fields[4])))?;
        let slot = *index.entry(fields[0].to_string()).or_insert_with(|| {
            lists.push(RankedList {
                query_id: fields[0].to_string(),
                entries: Vec::new(),
            });
            lists.len() - 1
        });
        lists[slot].entries.push(RankedEntry {
            passage_id: fields[2].to_string(),
            score,
            rank,
        });
    }
    for list in &mut lists {
        list.entries.sort_by_key(|e| e.rank);
    }
    Ok(lists)
}

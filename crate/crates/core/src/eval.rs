//! Ranking metrics (nDCG, MRR) and inference throughput.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::time::Instant;

use crate::data::CandidateSet;
use crate::encoder::ModelWeights;
use crate::error::{Error, Result};
use crate::inference::{rerank_batch, rerank_set, RankedList};
use crate::real::Real;

/// Graded judgments per query. Unjudged passages have relevance 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QrelSet {
    judgments: HashMap<String, HashMap<String, u32>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, passage_id: &str, relevance: u32) {
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), relevance);
    }

    pub fn relevance(&self, query_id: &str, passage_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|q| q.get(passage_id))
            .copied()
            .unwrap_or(0)
    }

    /// All judged relevance values of one query.
    pub fn judged(&self, query_id: &str) -> Vec<u32> {
        self.judgments
            .get(query_id)
            .map(|q| q.values().copied().collect())
            .unwrap_or_default()
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    /// Judgments taken from the relevance labels carried by candidate sets.
    pub fn from_candidate_sets(sets: &[CandidateSet]) -> Self {
        let mut qrels = Self::new();
        for set in sets {
            for c in &set.candidates {
                if let Some(rel) = c.relevance {
                    qrels.insert(&set.query_id, &c.passage_id, rel);
                }
            }
        }
        qrels
    }

    /// Reads four-column lines: `query_id 0 passage_id relevance`.
    pub fn read<R: BufRead>(input: R, path: &Path) -> Result<Self> {
        let mut qrels = Self::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let rel: u32 = fields[3]
                .parse()
                .map_err(|_| err(format!("bad relevance `{}`", fields[3])))?;
            qrels.insert(fields[0], fields[2], rel);
        }
        Ok(qrels)
    }

    /// Writes the four-column format, sorted by query then passage.
    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut queries: Vec<_> = self.judgments.iter().collect();
        queries.sort_by(|a, b| a.0.cmp(b.0));
        for (q, judged) in queries {
            let mut rows: Vec<_> = judged.iter().collect();
            rows.sort();
            for (p, rel) in rows {
                writeln!(out, "{q} 0 {p} {rel}")?;
            }
        }
        out.flush()
    }
}

fn gain(relevance: u32) -> f64 {
    2f64.powi(relevance as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// nDCG with exponential gain `2^rel - 1` and `log2(rank + 1)` discount.
///
/// The ideal ordering uses every judged passage of the query. Returns 0 when
/// the query has no relevant passage.
pub fn ndcg_at_k(ranking: &RankedList, qrels: &QrelSet, cutoff: usize) -> f64 {
    let dcg: f64 = ranking
        .entries
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(i, e)| gain(qrels.relevance(&ranking.query_id, &e.passage_id)) / discount(i + 1))
        .sum();
    let mut ideal = qrels.judged(&ranking.query_id);
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(i, &rel)| gain(rel) / discount(i + 1))
        .sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// Reciprocal rank of the first relevant passage within the cutoff, else 0.
pub fn mrr_at_k(ranking: &RankedList, qrels: &QrelSet, cutoff: usize) -> f64 {
    ranking
        .entries
        .iter()
        .take(cutoff)
        .position(|e| qrels.relevance(&ranking.query_id, &e.passage_id) > 0)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg: f64,
    pub mrr: f64,
}

/// Per-query metrics for every ranked list, in input order.
pub fn evaluate(rankings: &[RankedList], qrels: &QrelSet, cutoff: usize) -> Vec<QueryMetrics> {
    rankings
        .iter()
        .map(|r| QueryMetrics {
            query_id: r.query_id.clone(),
            ndcg: ndcg_at_k(r, qrels, cutoff),
            mrr: mrr_at_k(r, qrels, cutoff),
        })
        .collect()
}

/// Mean nDCG and MRR over queries; `(0, 0)` for an empty slice.
pub fn mean_metrics(per_query: &[QueryMetrics]) -> (f64, f64) {
    if per_query.is_empty() {
        return (0.0, 0.0);
    }
    let n = per_query.len() as f64;
    let ndcg = per_query.iter().map(|m| m.ndcg).sum::<f64>() / n;
    let mrr = per_query.iter().map(|m| m.mrr).sum::<f64>() / n;
    (ndcg, mrr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSelection {
    Ndcg,
    Mrr,
    Both,
}

/// Tab-separated table: one row per query plus a final `all` row with means.
pub fn write_metrics_table<W: Write>(
    mut out: W,
    per_query: &[QueryMetrics],
    cutoff: usize,
    selection: MetricSelection,
) -> io::Result<()> {
    let (ndcg_on, mrr_on) = match selection {
        MetricSelection::Ndcg => (true, false),
        MetricSelection::Mrr => (false, true),
        MetricSelection::Both => (true, true),
    };
    let mut header = vec!["query_id".to_string()];
    if ndcg_on {
        header.push(format!("ndcg@{cutoff}"));
    }
    if mrr_on {
        header.push(format!("mrr@{cutoff}"));
    }
    writeln!(out, "{}", header.join("\t"))?;
    let mut row = |id: &str, ndcg: f64, mrr: f64| {
        let mut cells = vec![id.to_string()];
        if ndcg_on {
            cells.push(format!("{ndcg:.6}"));
        }
        if mrr_on {
            cells.push(format!("{mrr:.6}"));
        }
        writeln!(out, "{}", cells.join("\t"))
    };
    for m in per_query {
        row(&m.query_id, m.ndcg, m.mrr)?;
    }
    let (ndcg, mrr) = mean_metrics(per_query);
    row("all", ndcg, mrr)?;
    out.flush()
}

/// Reranking throughput, measured per call of `batch` queries.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub batch: usize,
    pub warmup: usize,
    /// Timed calls; each reranks `batch` queries.
    pub timed: usize,
    pub total_seconds: f64,
    /// Timed queries divided by total timed wall clock.
    pub queries_per_second: f64,
    /// Mean and standard deviation of per-call rates `batch / latency`.
    pub qps_mean: f64,
    pub qps_std: f64,
    /// Per call.
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
}

/// Runs `warmup` untimed calls, then `timed` timed ones, each reranking the
/// next `batch` sets and cycling through `sets` as needed.
pub fn throughput_bench<F: Real>(
    weights: &ModelWeights<F>,
    sets: &[CandidateSet],
    batch: usize,
    warmup: usize,
    timed: usize,
) -> Result<BenchReport> {
    if sets.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if batch == 0 {
        return Err(Error::InvalidConfig(
            "bench batch size must be at least 1".into(),
        ));
    }
    let timed = timed.max(1);
    let mut stream = sets.iter().cycle();
    let mut next_batch = || -> Vec<CandidateSet> { stream.by_ref().take(batch).cloned().collect() };
    let run = |chunk: &[CandidateSet]| -> Result<()> {
        if chunk.len() == 1 {
            std::hint::black_box(rerank_set(&chunk[0], weights)?);
        } else {
            std::hint::black_box(rerank_batch(chunk, weights)?);
        }
        Ok(())
    };
    for _ in 0..warmup {
        run(&next_batch())?;
    }
    let chunks: Vec<Vec<CandidateSet>> = (0..timed).map(|_| next_batch()).collect();
    let mut latencies = Vec::with_capacity(timed);
    let start = Instant::now();
    for chunk in &chunks {
        let t = Instant::now();
        run(chunk)?;
        latencies.push(t.elapsed().as_secs_f64());
    }
    let total = start.elapsed().as_secs_f64();

    let (lat_mean, lat_std) = mean_std(&latencies);
    let rates: Vec<f64> = latencies
        .iter()
        .map(|l| batch as f64 / l.max(1e-12))
        .collect();
    let (qps_mean, qps_std) = mean_std(&rates);
    Ok(BenchReport {
        batch,
        warmup,
        timed,
        total_seconds: total,
        queries_per_second: (timed * batch) as f64 / total,
        qps_mean,
        qps_std,
        latency_mean_ms: lat_mean * 1e3,
        latency_std_ms: lat_std * 1e3,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

//! Generated candidate sets where relevance depends only on context.
//!
//! Each query is an entity vector `e`. Its candidates come from three documents:
//!
//! * the target document: a header chunk (index 0) carrying `e` plus noise,
//!   the gold chunk (index 1), and one more chunk (index 2..=5);
//! * a decoy document with the same layout around a different entity;
//! * a third document with chunk 1 and one later chunk.
//!
//! Every passage except the headers is an independent Gaussian vector, so the
//! raw dot product with the query ranks the target header first and says
//! nothing about the gold chunk. Finding it requires knowing which passages
//! share a document with the matching header and which of them is chunk 1.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{CandidateSet, EmbeddingVec, PassageRecord};
use crate::error::Result;

/// Candidates per generated query.
pub const CONTEXT_TASK_K: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextTask {
    pub dim: usize,
    pub queries: usize,
    /// Standard deviation of the noise added to header embeddings.
    pub header_noise: f64,
    pub seed: u64,
}

impl Default for ContextTask {
    fn default() -> Self {
        Self {
            dim: 32,
            queries: 2000,
            header_noise: 0.3,
            seed: 0,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    // f32-representable values keep f32 inference exact on the inputs.
    (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32 as f64
        })
        .collect()
}

impl ContextTask {
    /// Candidate sets with relevance 1 on the gold chunk and 0 elsewhere.
    pub fn generate(&self) -> Result<Vec<CandidateSet>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.queries).map(|i| self.one(i, &mut rng)).collect()
    }

    fn one(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<CandidateSet> {
        let d = self.dim;
        let qid = format!("q{index}");
        let target = gaussian(rng, d);
        let decoy = gaussian(rng, d);
        let header = |rng: &mut ChaCha8Rng, entity: &[f64]| -> Result<EmbeddingVec> {
            let noise = gaussian(rng, d);
            EmbeddingVec::new(
                entity
                    .iter()
                    .zip(noise)
                    .map(|(e, n)| (e + self.header_noise * n) as f32 as f64)
                    .collect(),
            )
        };
        let make = |rng: &mut ChaCha8Rng, doc: &str, chunk: usize, emb: Option<EmbeddingVec>| {
            let emb = match emb {
                Some(e) => e,
                None => EmbeddingVec::new(gaussian(rng, d))?,
            };
            Ok::<_, crate::Error>(
                PassageRecord::new(
                    format!("{qid}-{doc}-{chunk}"),
                    format!("{qid}-{doc}"),
                    chunk,
                    emb,
                )
                .with_relevance(0),
            )
        };

        let later = |rng: &mut ChaCha8Rng| rng.gen_range(2..=5);
        let target_header = header(rng, &target)?;
        let decoy_header = header(rng, &decoy)?;
        let (c_a, c_b, c_c) = (later(rng), later(rng), later(rng));
        let mut candidates = vec![
            make(rng, "a", 0, Some(target_header))?,
            make(rng, "a", 1, None)?.with_relevance(1),
            make(rng, "a", c_a, None)?,
            make(rng, "b", 0, Some(decoy_header))?,
            make(rng, "b", 1, None)?,
            make(rng, "b", c_b, None)?,
            make(rng, "c", 1, None)?,
            make(rng, "c", c_c, None)?,
        ];
        candidates.shuffle(rng);
        CandidateSet::new(qid, EmbeddingVec::new(target)?, candidates, CONTEXT_TASK_K)
    }
}

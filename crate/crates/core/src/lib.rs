//! Context-aware reranking of retrieved passages in embedding space.
//!
//! Passages arrive as precomputed dense embeddings together with their source
//! document and chunk position. The reranker adds document-slot and position
//! signals, runs a stack of hybrid-attention transformer layers over the query
//! and the candidates jointly, and scores each contextualized passage by its dot
//! product with the unmodified query embedding.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod real;
pub mod synthetic;
pub mod training;

pub use config::{parse_config, ModelConfig, NormPlacement, TrainerConfig};
pub use data::{
    enrich, sinusoidal_position_encoding, AttentionMask, CandidateSet, DocSlotMap, EmbeddingVec,
    PassageRecord, MASKED,
};
pub use encoder::{encode, encode_with_slots, ModelWeights, Params};
pub use error::{CheckpointError, Error, Result};
pub use eval::{evaluate, mrr_at_k, ndcg_at_k, QrelSet};
pub use inference::{rerank, rerank_batch, rerank_set, RankedEntry, RankedList};
pub use io::{load_candidates, load_checkpoint, save_checkpoint, CandidateRecord};
pub use real::Real;
pub use training::{construct_training_instance, info_nce_loss, train, TrainingInstance};

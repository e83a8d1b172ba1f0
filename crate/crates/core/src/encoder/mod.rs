//! Hybrid-attention transformer stack over a query and its enriched passages.
//!
//! The sequence fed to the stack has the raw query at row 0 and the enriched
//! passages at rows `1..=k` in candidate order. Each layer sums a shared
//! full-attention module with a document-masked one, then applies a
//! feed-forward block, with residual adds and layer normalization around both.

mod attention;
mod layer;
mod params;

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

pub use params::{
    AttentionWeights, FeedForwardWeights, LayerNormWeights, LayerWeights, ModelWeights, Params,
    DOC_TABLE_INIT_STD,
};

pub(crate) use layer::Dropout;
use layer::{layer_backward, layer_forward, LayerCache};

use crate::config::ModelConfig;
use crate::data::{
    check_candidates, write_enriched, AttentionMask, DocSlotMap, EmbeddingVec, PassageRecord,
};
use crate::error::{Error, Result};
use crate::real::Real;

/// Multi-head attention as a standalone operation.
///
/// With `mask = None` this is the shared full-attention module; with a mask it
/// is the dedicated document-restricted module.
pub fn multi_head_attention<F: Real>(
    state: &Array2<F>,
    weights: &AttentionWeights<F>,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Result<Array2<F>> {
    let (n, d) = state.dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "dim {d} is not divisible by {heads} heads"
        )));
    }
    check_projection_shapes(weights, d)?;
    let mask = mask
        .map(|m| check_mask(m, n).map(|_| m.to_array::<F>()))
        .transpose()?;
    let (out, _) =
        attention::attention_forward(state, weights, mask.as_ref().map(|m| m.view()), heads, None);
    ensure_finite(&out, "attention output")?;
    Ok(out)
}

/// Attention probabilities of one module as computed inside [`multi_head_attention`].
pub fn attention_probabilities<F: Real>(
    state: &Array2<F>,
    weights: &AttentionWeights<F>,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Result<Vec<Array2<F>>> {
    let (n, d) = state.dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "dim {d} is not divisible by {heads} heads"
        )));
    }
    check_projection_shapes(weights, d)?;
    let mask = mask
        .map(|m| check_mask(m, n).map(|_| m.to_array::<F>()))
        .transpose()?;
    let (_, cache) =
        attention::attention_forward(state, weights, mask.as_ref().map(|m| m.view()), heads, None);
    Ok(cache.probs)
}

/// One hybrid layer on an explicit sequence state, without dropout.
pub fn hybrid_layer_forward<F: Real>(
    state: &Array2<F>,
    mask: &AttentionMask,
    weights: &LayerWeights<F>,
    config: &ModelConfig,
) -> Result<Array2<F>> {
    config.validate()?;
    let (n, d) = state.dim();
    if d != config.dim {
        return Err(Error::DimensionMismatch {
            context: "sequence state".into(),
            expected: config.dim,
            found: d,
        });
    }
    check_mask(mask, n)?;
    let mask = mask.to_array::<F>();
    let (out, _) = layer_forward(state, mask.view(), weights, config, None);
    ensure_finite(&out, "layer output")?;
    Ok(out)
}

/// Contextualized passage embeddings for a candidate list.
///
/// The slot map is built from candidate order. Fails with
/// [`Error::CandidateOverflow`] when `k > k_max`.
pub fn encode<F: Real>(
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    weights: &ModelWeights<F>,
) -> Result<Vec<EmbeddingVec>> {
    let slot_map = DocSlotMap::build(candidates)?;
    encode_with_slots(query, candidates, &slot_map, weights)
}

/// Like [`encode`], with an externally fixed document slot assignment.
pub fn encode_with_slots<F: Real>(
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    slot_map: &DocSlotMap,
    weights: &ModelWeights<F>,
) -> Result<Vec<EmbeddingVec>> {
    let out = encode_passages(query, candidates, slot_map, weights)?;
    out.rows()
        .into_iter()
        .map(|r| EmbeddingVec::new(r.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Rows `1..=k` of the final sequence state.
pub(crate) fn encode_passages<F: Real>(
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    slot_map: &DocSlotMap,
    weights: &ModelWeights<F>,
) -> Result<Array2<F>> {
    let (input, _) = build_input(query, candidates, slot_map, weights)?;
    let mask = AttentionMask::build(candidates)?.to_array::<F>();
    let mut state = input;
    for lw in &weights.params.layers {
        state = layer_forward(&state, mask.view(), lw, &weights.config, None).0;
        ensure_finite(&state, "layer output")?;
    }
    Ok(state.slice(s![1.., ..]).to_owned())
}

/// Attention probabilities recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<F> {
    /// Per layer, one `(k+1) x (k+1)` matrix per head.
    pub shared: Vec<Vec<Array2<F>>>,
    /// Empty per layer when the dedicated module is disabled.
    pub dedicated: Vec<Vec<Array2<F>>>,
    pub mask: AttentionMask,
    /// Final sequence state, query row included.
    pub output: Array2<F>,
}

pub fn encode_traced<F: Real>(
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    weights: &ModelWeights<F>,
) -> Result<EncoderTrace<F>> {
    let slot_map = DocSlotMap::build(candidates)?;
    let fwd = forward(weights, query, candidates, &slot_map, None)?;
    let shared = fwd.layers.iter().map(|c| c.shared.probs.clone()).collect();
    let dedicated = fwd
        .layers
        .iter()
        .map(|c| {
            c.dedicated
                .as_ref()
                .map(|d| d.probs.clone())
                .unwrap_or_default()
        })
        .collect();
    Ok(EncoderTrace {
        shared,
        dedicated,
        mask: AttentionMask::build(candidates)?,
        output: fwd.output,
    })
}

/// Forward pass with every activation needed for backpropagation.
pub(crate) struct Forward<F> {
    slots: Vec<usize>,
    layers: Vec<LayerCache<F>>,
    /// Final `(k+1) x d` state.
    pub(crate) output: Array2<F>,
}

pub(crate) fn forward<F: Real>(
    weights: &ModelWeights<F>,
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    slot_map: &DocSlotMap,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward<F>> {
    let (input, slots) = build_input(query, candidates, slot_map, weights)?;
    let mask = AttentionMask::build(candidates)?.to_array::<F>();
    let config = &weights.config;
    let mut dropout = rng.filter(|_| config.dropout > 0.0).map(|rng| Dropout {
        rng,
        rate: config.dropout,
    });

    let mut state = input;
    let mut layers = Vec::with_capacity(config.layers);
    for lw in &weights.params.layers {
        let (next, cache) = layer_forward(&state, mask.view(), lw, config, dropout.as_mut());
        ensure_finite(&next, "layer output")?;
        state = next;
        layers.push(cache);
    }
    Ok(Forward {
        slots,
        layers,
        output: state,
    })
}

/// Gradients of every parameter given `dL/d(output)` for the full final state.
pub(crate) fn backward<F: Real>(
    fwd: &Forward<F>,
    d_output: &Array2<F>,
    weights: &ModelWeights<F>,
) -> Params<F> {
    let config = &weights.config;
    let mut grads = Params::zeros(config);
    let mut d_state = d_output.clone();
    for ((cache, lw), g) in fwd
        .layers
        .iter()
        .zip(&weights.params.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        d_state = layer_backward(&d_state, cache, lw, config, g);
    }
    if config.positional {
        for (i, &slot) in fwd.slots.iter().enumerate() {
            let mut row = grads.doc_table.row_mut(slot);
            row += &d_state.row(i + 1);
        }
    }
    grads
}

/// Stacks the raw query and the enriched passages into the initial state.
fn build_input<F: Real>(
    query: &EmbeddingVec,
    candidates: &[PassageRecord],
    slot_map: &DocSlotMap,
    weights: &ModelWeights<F>,
) -> Result<(Array2<F>, Vec<usize>)> {
    let config = &weights.config;
    check_candidates(candidates, config.k_max)?;
    query.expect_dim(config.dim, "query embedding")?;
    for (i, c) in candidates.iter().enumerate() {
        c.embedding
            .expect_dim(config.dim, &format!("candidate {i}"))?;
    }
    let slots = slot_map.slots_for(candidates, config.k_max)?;

    let mut input = Array2::zeros((candidates.len() + 1, config.dim));
    input
        .row_mut(0)
        .iter_mut()
        .zip(query.as_slice())
        .for_each(|(x, &v)| *x = F::lit(v));
    for (i, (c, &slot)) in candidates.iter().zip(&slots).enumerate() {
        write_enriched(
            input.row_mut(i + 1),
            c,
            slot,
            weights.params.doc_table.view(),
            config.positional,
        );
    }
    Ok((input, slots))
}

fn check_projection_shapes<F: Real>(w: &AttentionWeights<F>, d: usize) -> Result<()> {
    for m in [&w.query, &w.key, &w.value, &w.output] {
        if m.dim() != (d, d) {
            return Err(Error::DimensionMismatch {
                context: "attention projection".into(),
                expected: d,
                found: m.nrows(),
            });
        }
    }
    Ok(())
}

fn check_mask(mask: &AttentionMask, n: usize) -> Result<()> {
    if mask.size() != n {
        return Err(Error::DimensionMismatch {
            context: "attention mask".into(),
            expected: n,
            found: mask.size(),
        });
    }
    Ok(())
}

fn ensure_finite<F: Real>(a: &Array2<F>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

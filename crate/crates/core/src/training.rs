//! Training instances, the contrastive objective, and the optimization loop.

use std::time::Instant;

use ndarray::{s, Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainerConfig;
use crate::data::{CandidateSet, DocSlotMap, EmbeddingVec, PassageRecord};
use crate::encoder::{backward, forward, ModelWeights, Params};
use crate::error::{Error, Result};
use crate::real::Real;

/// A candidate set with exactly one gold passage (relevance 1, all others 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    set: CandidateSet,
    gold: usize,
}

impl TrainingInstance {
    /// Validates the single-gold contract and normalizes labels to 1/0.
    pub fn new(mut set: CandidateSet, k_max: usize) -> Result<Self> {
        set.validate(k_max)?;
        let gold: Vec<usize> = set
            .candidates
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.is_relevant().then_some(i))
            .collect();
        let gold = match gold.as_slice() {
            [g] => *g,
            [] => {
                return Err(Error::InvalidInstance(format!(
                    "query `{}` has no gold passage",
                    set.query_id
                )))
            }
            _ => {
                return Err(Error::InvalidInstance(format!(
                    "query `{}` has {} gold passages, expected exactly one",
                    set.query_id,
                    gold.len()
                )))
            }
        };
        if set.len() < 2 {
            return Err(Error::NoNegatives);
        }
        for (i, c) in set.candidates.iter_mut().enumerate() {
            c.relevance = Some(u32::from(i == gold));
        }
        Ok(Self { set, gold })
    }

    pub fn set(&self) -> &CandidateSet {
        &self.set
    }

    pub fn gold_index(&self) -> usize {
        self.gold
    }

    pub fn gold(&self) -> &PassageRecord {
        &self.set.candidates[self.gold]
    }
}

/// Builds a training instance from retriever output.
///
/// The gold passage is matched by `passage_id`. If it is already among the
/// retrieved passages only the labels change. Otherwise it replaces the
/// last-ranked passage when `k_max` passages were retrieved, or is appended
/// when fewer were. Without an explicit `gold`, the single retrieved passage
/// with positive relevance is used. The final order is a uniform shuffle.
pub fn construct_training_instance<R: Rng + ?Sized>(
    query_id: &str,
    query: EmbeddingVec,
    retrieved: Vec<PassageRecord>,
    gold: Option<PassageRecord>,
    k_max: usize,
    rng: &mut R,
) -> Result<TrainingInstance> {
    if retrieved.len() > k_max {
        return Err(Error::CandidateOverflow {
            count: retrieved.len(),
            k_max,
        });
    }
    let mut candidates = retrieved;
    let gold_id = match gold {
        Some(gold) => {
            let id = gold.passage_id.clone();
            if !candidates.iter().any(|c| c.passage_id == id) {
                if candidates.len() == k_max {
                    candidates.pop();
                }
                candidates.push(gold);
            }
            id
        }
        None => {
            if candidates.is_empty() {
                return Err(Error::EmptyCandidates);
            }
            let relevant: Vec<_> = candidates.iter().filter(|c| c.is_relevant()).collect();
            match relevant.as_slice() {
                [g] => g.passage_id.clone(),
                _ => {
                    return Err(Error::InvalidInstance(format!(
                        "query `{query_id}`: no gold given and {} retrieved passages are relevant",
                        relevant.len()
                    )))
                }
            }
        }
    };
    for c in &mut candidates {
        c.relevance = Some(u32::from(c.passage_id == gold_id));
    }
    candidates.shuffle(rng);
    let set = CandidateSet::new(query_id, query, candidates, k_max)?;
    TrainingInstance::new(set, k_max)
}

/// Loss and `dL/dscore` of a softmax cross-entropy over `scores` with the
/// positive at `gold`, computed with max subtraction.
pub fn info_nce_from_scores(scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if scores.len() < 2 {
        return Err(Error::NoNegatives);
    }
    if gold >= scores.len() {
        return Err(Error::InvalidInstance(format!(
            "gold index {gold} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("similarity score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - scores[gold];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == gold { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Contrastive loss with dot-product similarity against the raw query.
pub fn info_nce_loss(
    query: &EmbeddingVec,
    positive: &EmbeddingVec,
    negatives: &[EmbeddingVec],
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::NoNegatives);
    }
    let d = query.dim();
    positive.expect_dim(d, "positive passage")?;
    let mut scores = Vec::with_capacity(negatives.len() + 1);
    scores.push(query.dot(positive));
    for n in negatives {
        n.expect_dim(d, "negative passage")?;
        scores.push(query.dot(n));
    }
    info_nce_from_scores(&scores, 0).map(|(loss, _)| loss)
}

/// Loss of one instance and the gradient of that loss with respect to every parameter.
#[derive(Debug, Clone)]
pub struct LossGradient<F> {
    pub loss: f64,
    pub grads: Params<F>,
    /// Dot-product scores of the candidates, in instance order.
    pub scores: Vec<f64>,
}

/// Exact gradient of the contrastive loss through the encoder, without dropout.
pub fn loss_gradient<F: Real>(
    instance: &TrainingInstance,
    weights: &ModelWeights<F>,
    temperature: f64,
) -> Result<LossGradient<F>> {
    loss_gradient_with_rng(instance, weights, temperature, None)
}

fn loss_gradient_with_rng<F: Real>(
    instance: &TrainingInstance,
    weights: &ModelWeights<F>,
    temperature: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossGradient<F>> {
    let set = &instance.set;
    let slot_map = DocSlotMap::build(&set.candidates)?;
    let fwd = forward(
        weights,
        &set.query_embedding,
        &set.candidates,
        &slot_map,
        rng,
    )?;
    let query: Vec<F> = set
        .query_embedding
        .as_slice()
        .iter()
        .map(|&v| F::lit(v))
        .collect();

    let scores: Vec<f64> = fwd
        .output
        .slice(s![1.., ..])
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(&query)
                .map(|(&a, &b)| a * b)
                .sum::<F>()
                .as_f64()
        })
        .collect();
    let logits: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let (loss, d_logits) = info_nce_from_scores(&logits, instance.gold)?;

    let mut d_output = Array2::zeros(fwd.output.dim());
    for (i, g) in d_logits.iter().enumerate() {
        let coeff = F::lit(g / temperature);
        d_output
            .row_mut(i + 1)
            .iter_mut()
            .zip(&query)
            .for_each(|(d, &q)| *d = coeff * q);
    }
    let grads = backward(&fwd, &d_output, weights);
    Ok(LossGradient {
        loss,
        grads,
        scores,
    })
}

/// Loss of one instance without dropout or gradients.
pub fn instance_loss<F: Real>(
    instance: &TrainingInstance,
    weights: &ModelWeights<F>,
    temperature: f64,
) -> Result<f64> {
    let scores = crate::inference::score(
        &instance.set.query_embedding,
        &instance.set.candidates,
        weights,
    )?;
    let logits: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    info_nce_from_scores(&logits, instance.gold).map(|(loss, _)| loss)
}

/// Adam with bias correction and optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    first: Params<f64>,
    second: Params<f64>,
    step: i32,
}

impl Adam {
    pub fn new(config: &TrainerConfig, like: &ModelWeights<f64>) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            first: Params::zeros(&like.config),
            second: Params::zeros(&like.config),
            step: 0,
        }
    }

    /// Applies one update, then rounds parameters to f32 precision so that
    /// checkpoints reproduce them exactly.
    pub fn step(&mut self, params: &mut Params<f64>, grads: &Params<f64>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let correction1 = 1.0 - b1.powi(self.step);
        let correction2 = 1.0 - b2.powi(self.step);
        let (lr, eps, wd) = (self.learning_rate, self.eps, self.weight_decay);
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
        {
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        params.round_to_f32();
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub weights: ModelWeights<f64>,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch that produced `weights`.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean validation loss, evaluated without dropout.
pub fn mean_loss(
    instances: &[TrainingInstance],
    weights: &ModelWeights<f64>,
    temperature: f64,
) -> Result<f64> {
    let losses = instances
        .par_iter()
        .map(|inst| instance_loss(inst, weights, temperature))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minibatch Adam over shuffled epochs with early stopping on validation loss.
///
/// `on_epoch` sees each log record as soon as the epoch finishes.
pub fn train(
    train_set: &[TrainingInstance],
    val_set: &[TrainingInstance],
    weights: ModelWeights<f64>,
    config: &TrainerConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidConfig(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut weights = weights;
    let mut adam = Adam::new(config, &weights);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();

    let mut best: Option<(f64, usize, ModelWeights<f64>)> = None;
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut step = 0u64;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let (batch_loss, grads) = batch_gradient(train_set, batch, &weights, config, step)?;
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: step as usize,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            adam.step(&mut weights.params, &grads);
        }

        let val_loss = mean_loss(val_set, &weights, config.temperature)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: step as usize,
                loss: val_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, weights.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }

    let (_, best_epoch, weights) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        weights,
        log,
        best_epoch,
        stopped_early,
    })
}

/// Summed loss and mean gradient over one batch.
///
/// Instances are evaluated in parallel in groups of the pool size and
/// accumulated in batch order, so the result does not depend on scheduling.
fn batch_gradient(
    data: &[TrainingInstance],
    batch: &[usize],
    weights: &ModelWeights<f64>,
    config: &TrainerConfig,
    step: u64,
) -> Result<(f64, Params<f64>)> {
    let mut total = Params::zeros(&weights.config);
    let mut loss = 0.0;
    let group = rayon::current_num_threads().max(1);
    for (g, chunk) in batch.chunks(group).enumerate() {
        let parts = chunk
            .par_iter()
            .enumerate()
            .map(|(j, &idx)| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((step << 24) | (g * group + j) as u64);
                loss_gradient_with_rng(&data[idx], weights, config.temperature, Some(&mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        for part in parts {
            loss += part.loss;
            total.add_scaled(&part.grads, 1.0);
        }
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((loss, total))
}

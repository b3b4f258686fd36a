//! Prototype classifier on top of adapted representations, and the
//! episodic loss.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UrtError};
use crate::layer::{forward_episode, EpisodeEmbedding, UrtParams};
use crate::math::{argmax, cosine_similarity, head_diversity_penalty, mean_of, softmax, NORM_EPS};
use crate::sampler::Episode;
use crate::store::FeatureStore;

/// Default multiplier applied to cosine similarities before the softmax.
pub const DEFAULT_SCALE: f64 = 10.0;

/// Class centroids of adapted support embeddings, in episode class order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub penalty: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn prototypes(embedding: &EpisodeEmbedding) -> Result<Prototypes> {
    let centroids = embedding
        .support
        .iter()
        .enumerate()
        .map(|(c, group)| {
            let dim = group.first().map(Vec::len).ok_or_else(|| {
                UrtError::Shape(format!("class index {c} has no support embeddings"))
            })?;
            Ok(mean_of(group.iter().map(Vec::as_slice), dim))
        })
        .collect::<Result<_>>()?;
    Ok(Prototypes { centroids })
}

/// `softmax_c(scale · cos(φ(x), p_c))`.
pub fn classify(query: &[f64], protos: &Prototypes, scale: f64) -> Result<Vec<f64>> {
    let logits = protos
        .centroids
        .iter()
        .map(|p| cosine_similarity(query, p, NORM_EPS).map(|s| scale * s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&logits))
}

/// Predicted class index; ties go to the lowest index.
pub fn predict(query: &[f64], protos: &Prototypes) -> Result<usize> {
    let sims = protos
        .centroids
        .iter()
        .map(|p| cosine_similarity(query, p, NORM_EPS))
        .collect::<Result<Vec<f64>>>()?;
    Ok(argmax(&sims))
}

/// Loss terms from an already computed forward pass.
pub fn loss_from_embedding(
    embedding: &EpisodeEmbedding,
    lambda: f64,
    scale: f64,
) -> Result<LossBreakdown> {
    let protos = prototypes(embedding)?;
    let mut nll = 0.0;
    let mut count = 0usize;
    for (c, group) in embedding.query.iter().enumerate() {
        for q in group {
            let probs = classify(q, &protos, scale)?;
            nll -= probs[c].ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(UrtError::Shape("episode has no query samples".into()));
    }
    let cross_entropy = nll / count as f64;
    let penalty = head_diversity_penalty(&embedding.attention.score_matrix());
    Ok(LossBreakdown {
        cross_entropy,
        penalty,
        total: cross_entropy + lambda * penalty,
        lambda,
    })
}

pub fn episode_loss(
    params: &UrtParams,
    store: &FeatureStore,
    episode: &Episode,
    lambda: f64,
    scale: f64,
) -> Result<LossBreakdown> {
    let embedding = forward_episode(params, store, episode)?;
    loss_from_embedding(&embedding, lambda, scale)
}

/// Fraction of query samples whose nearest prototype is their own class.
pub fn episode_accuracy(params: &UrtParams, store: &FeatureStore, episode: &Episode) -> Result<f64> {
    let embedding = forward_episode(params, store, episode)?;
    let protos = prototypes(&embedding)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (c, group) in embedding.query.iter().enumerate() {
        for q in group {
            correct += usize::from(predict(q, &protos)? == c);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

//! Importance resampling of raw pools toward a target text distribution.
//!
//! A model holds smoothed bucket distributions for the target and the raw
//! pool. A record's log importance weight is the sum over its feature buckets
//! of count * (ln target[b] - ln raw[b]). Selection perturbs weights with
//! Gumbel noise and takes the top k, which draws k records without
//! replacement in proportion to their (soft) importance.

use crate::featurizer::{
    fit_bucket_distribution, BucketDistribution, FeatureVector, FeaturizerError,
};
use crate::util::{gumbel, hash_index, Fnv64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DsirError {
    #[error("target feature stream is empty")]
    EmptyTarget,
    #[error("raw feature stream is empty")]
    EmptyRaw,
    #[error("requested k = {k} exceeds pool size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error(transparent)]
    Featurizer(#[from] FeaturizerError),
}

/// Fitted target/raw bucket distributions plus the precomputed per-bucket
/// log ratio used for scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceModel {
    pub target: BucketDistribution,
    pub raw: BucketDistribution,
    log_ratio: Vec<f64>,
    pub target_size: usize,
    pub raw_sample_size: usize,
}

impl ImportanceModel {
    pub fn buckets(&self) -> usize {
        self.log_ratio.len()
    }
}

/// Fits an importance model. The raw side is fitted on a uniform sample of at
/// most `raw_sample_cap` feature vectors, chosen by seeded hash rank so the
/// sample does not depend on stream order or sharding.
pub fn fit_importance_model<T, R>(
    target_features: T,
    raw_features: R,
    alpha: f64,
    buckets: usize,
    raw_sample_cap: usize,
    seed: u64,
) -> Result<ImportanceModel, DsirError>
where
    T: IntoIterator<Item = FeatureVector>,
    R: IntoIterator<Item = FeatureVector>,
{
    let mut target_size = 0usize;
    let target = fit_bucket_distribution(
        target_features.into_iter().inspect(|_| target_size += 1),
        alpha,
        buckets,
    )?;
    if target_size == 0 {
        return Err(DsirError::EmptyTarget);
    }

    // Keep the cap feature vectors with the smallest hash of their stream
    // index: a deterministic uniform sample without knowing the pool size.
    let mut heap: BinaryHeap<(u64, usize)> = BinaryHeap::new();
    let mut kept: Vec<FeatureVector> = Vec::new();
    let mut raw_seen = 0usize;
    for (idx, fv) in raw_features.into_iter().enumerate() {
        raw_seen += 1;
        let rank = hash_index(seed ^ 0x5261_77fe, idx as u64);
        if kept.len() < raw_sample_cap {
            heap.push((rank, kept.len()));
            kept.push(fv);
        } else if let Some(&(top, slot)) = heap.peek() {
            if rank < top {
                heap.pop();
                kept[slot] = fv;
                heap.push((rank, slot));
            }
        }
    }
    if raw_seen == 0 {
        return Err(DsirError::EmptyRaw);
    }
    let raw_sample_size = kept.len();
    let raw = fit_bucket_distribution(kept, alpha, buckets)?;

    let log_ratio = target
        .probs
        .iter()
        .zip(&raw.probs)
        .map(|(&t, &r)| t.ln() - r.ln())
        .collect();
    Ok(ImportanceModel { target, raw, log_ratio, target_size, raw_sample_size })
}

/// Log importance weight of one feature vector under the model.
pub fn log_importance_weight(model: &ImportanceModel, features: &FeatureVector) -> f64 {
    let mut w = 0.0;
    for (b, c) in features.iter() {
        w += f64::from(c) * model.log_ratio[b as usize];
    }
    w
}

/// Scores a batch in parallel; output order matches input order regardless of
/// worker count.
pub fn score_features(model: &ImportanceModel, features: &[FeatureVector]) -> Vec<f64> {
    features.par_iter().map(|fv| log_importance_weight(model, fv)).collect()
}

/// Draws k indices by Gumbel top-k: key_i = w_i + noise_scale * Gumbel(0,1),
/// noise derived from (seed, i). Returns indices sorted ascending. Equal keys
/// break toward the smaller index.
pub fn gumbel_topk_resample(
    log_weights: &[f64],
    k: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<Vec<usize>, DsirError> {
    let n = log_weights.len();
    if k > n {
        return Err(DsirError::KTooLarge { k, n });
    }
    let mut keyed: Vec<(f64, usize)> = log_weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let mut h = Fnv64::with_seed(seed);
            h.write_u64(i as u64);
            (w + noise_scale * gumbel(h.finish()), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut selected: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
    selected.sort_unstable();
    Ok(selected)
}

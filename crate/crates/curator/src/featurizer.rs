//! Hashed n-gram featurization and bucket distributions.
//!
//! Text is lowercased and split into alphanumeric runs; whitespace,
//! punctuation, and symbols are boundaries. Word n-grams are hashed into a
//! fixed number of buckets with seeded FNV-1a, so features are stable across
//! runs and machines. Bucket distributions add `alpha` smoothing to every
//! bucket, which keeps log-ratios finite for unseen buckets.

use crate::util::Fnv64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    /// Word n-gram orders to include.
    #[serde(default = "default_orders")]
    pub ngram_orders: Vec<usize>,
    /// Number of hash buckets B.
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    /// Hash seed; changing it re-randomizes every bucket assignment.
    #[serde(default)]
    pub seed: u64,
    /// Featurize only human turns (the instruction side) when true.
    #[serde(default = "default_true")]
    pub prompt_only: bool,
}

fn default_orders() -> Vec<usize> {
    vec![1, 2]
}

fn default_buckets() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            ngram_orders: default_orders(),
            buckets: default_buckets(),
            seed: 0,
            prompt_only: true,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeaturizerError {
    #[error("cannot fit a distribution from an empty stream with alpha = 0")]
    EmptyFit,
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
}

/// Sparse bucket counts for one text. Iteration order is ascending bucket
/// index, so downstream accumulation is deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    counts: BTreeMap<u32, u32>,
    pub buckets: usize,
}

impl FeatureVector {
    pub fn from_counts<I: IntoIterator<Item = (u32, u32)>>(counts: I, buckets: usize) -> Self {
        let mut fv = FeatureVector { counts: BTreeMap::new(), buckets };
        for (b, c) in counts {
            *fv.counts.entry(b).or_insert(0) += c;
        }
        fv
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.counts.iter().map(|(&b, &c)| (b, c))
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, bucket: u32) -> u32 {
        self.counts.get(&bucket).copied().unwrap_or(0)
    }

    fn bump(&mut self, bucket: u32) {
        *self.counts.entry(bucket).or_insert(0) += 1;
    }
}

/// Lowercased alphanumeric tokens. Everything else is a boundary.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                current.push(lc);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn ngram_bucket(tokens: &[String], seed: u64, order: usize, buckets: usize) -> impl Iterator<Item = u32> + '_ {
    tokens.windows(order).map(move |window| {
        let mut h = Fnv64::with_seed(seed);
        h.write_u64(order as u64);
        for token in window {
            h.write_str(token);
        }
        (h.finish() % buckets as u64) as u32
    })
}

/// Hashes the configured word n-grams of `text` into bucket counts.
/// Empty or boundary-only text yields an empty vector.
pub fn hash_ngram_features(text: &str, config: &FeaturizerConfig) -> FeatureVector {
    let tokens = tokenize(text);
    let mut fv = FeatureVector { counts: BTreeMap::new(), buckets: config.buckets };
    for &order in &config.ngram_orders {
        if order == 0 || tokens.len() < order {
            continue;
        }
        for bucket in ngram_bucket(&tokens, config.seed, order, config.buckets) {
            fv.bump(bucket);
        }
    }
    fv
}

/// Smoothed probability over hash buckets, the building block of importance
/// weights. `probs` sums to 1 within float error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDistribution {
    pub probs: Vec<f64>,
    pub alpha: f64,
}

impl BucketDistribution {
    pub fn buckets(&self) -> usize {
        self.probs.len()
    }
}

/// Fits a smoothed distribution over bucket counts:
/// probs[b] = (count[b] + alpha) / (total + alpha * B).
pub fn fit_bucket_distribution<I>(
    features: I,
    alpha: f64,
    buckets: usize,
) -> Result<BucketDistribution, FeaturizerError>
where
    I: IntoIterator<Item = FeatureVector>,
{
    let mut counts = vec![0u64; buckets];
    let mut total = 0u64;
    for fv in features {
        for (b, c) in fv.iter() {
            counts[b as usize] += u64::from(c);
            total += u64::from(c);
        }
    }
    if total == 0 && alpha <= 0.0 {
        return Err(FeaturizerError::EmptyFit);
    }
    let denom = total as f64 + alpha * buckets as f64;
    let probs = counts.iter().map(|&c| (c as f64 + alpha) / denom).collect();
    Ok(BucketDistribution { probs, alpha })
}

/// KL divergence sum(p * ln(p/q)) over buckets. Zero-probability p buckets
/// contribute nothing; q must be smoothed (strictly positive) where p > 0.
pub fn kl_divergence(p: &BucketDistribution, q: &BucketDistribution) -> Result<f64, FeaturizerError> {
    if p.probs.len() != q.probs.len() {
        return Err(FeaturizerError::DimMismatch(p.probs.len(), q.probs.len()));
    }
    let mut kl = 0.0;
    for (&pp, &qq) in p.probs.iter().zip(&q.probs) {
        if pp > 0.0 {
            kl += pp * (pp / qq).ln();
        }
    }
    Ok(kl)
}

/// Cosine similarity of two dense vectors.
pub fn cosine_dense(a: &[f32], b: &[f32]) -> Result<f64, FeaturizerError> {
    if a.len() != b.len() {
        return Err(FeaturizerError::DimMismatch(a.len(), b.len()));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += f64::from(x) * f64::from(y);
        na += f64::from(x) * f64::from(x);
        nb += f64::from(y) * f64::from(y);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(FeaturizerError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Cosine similarity of two sparse count vectors.
pub fn cosine_sparse(a: &FeatureVector, b: &FeatureVector) -> Result<f64, FeaturizerError> {
    if a.is_empty() || b.is_empty() {
        return Err(FeaturizerError::ZeroVector);
    }
    let mut dot = 0.0f64;
    for (bucket, ca) in a.iter() {
        let cb = b.get(bucket);
        if cb > 0 {
            dot += f64::from(ca) * f64::from(cb);
        }
    }
    let na: f64 = a.iter().map(|(_, c)| f64::from(c) * f64::from(c)).sum();
    let nb: f64 = b.iter().map(|(_, c)| f64::from(c) * f64::from(c)).sum();
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

//! Two-layer capability labeling.
//!
//! Second-level labels come from an LLM tagger (free-form tags, normalized
//! and deduplicated), then get compressed by clustering tag embeddings and
//! naming each cluster after its most frequent member. First-level labels are
//! derived by asking the model to group the canonical second-level labels
//! into a bounded set of broad categories; anything left uncovered lands in
//! the `Other` bucket. A manual override file can remap any alias after
//! clustering; the final alias map is always idempotent.

use crate::corpus::{InstructionRecord, LabelSet};
use crate::gateway::{ChatMessage, Gateway, GatewayError, GatewayRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

pub const OTHER_CATEGORY: &str = "Other";

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("cluster count {k} is invalid for {n} distinct tags")]
    BadClusterCount { k: usize, n: usize },
    #[error("no embedding available for tag '{0}'")]
    MissingEmbedding(String),
    #[error("alias chain for '{0}' does not terminate")]
    AliasCycle(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSystemConfig {
    /// Maximum tags kept per record.
    #[serde(default = "default_max_tags")]
    pub max_tags: usize,
    /// Delimiter the tagger is asked to emit between tags.
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    /// Parse-failure retries before a record is flagged untaggable.
    #[serde(default = "default_retry")]
    pub retries: u32,
    /// Number of clusters for tag normalization; 0 picks two thirds of the
    /// distinct tag count.
    #[serde(default)]
    pub cluster_count: usize,
    /// Target number of first-level categories.
    #[serde(default = "default_first_level")]
    pub first_level_target: usize,
    /// Labels per grouping call.
    #[serde(default = "default_chunk")]
    pub group_chunk: usize,
}

fn default_max_tags() -> usize {
    8
}

fn default_delimiter() -> String {
    ";".into()
}

fn default_retry() -> u32 {
    1
}

fn default_first_level() -> usize {
    26
}

fn default_chunk() -> usize {
    200
}

impl Default for LabelSystemConfig {
    fn default() -> Self {
        LabelSystemConfig {
            max_tags: default_max_tags(),
            delimiter: default_delimiter(),
            retries: default_retry(),
            cluster_count: 0,
            first_level_target: default_first_level(),
            group_chunk: default_chunk(),
        }
    }
}

/// Alias map (raw tag -> canonical label), canonical set, and parent map
/// (canonical -> first-level category).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    pub second_level: BTreeSet<String>,
    pub first_level: BTreeSet<String>,
    pub parent: BTreeMap<String, String>,
    pub alias: BTreeMap<String, String>,
}

impl LabelTaxonomy {
    pub fn canonicalize<'a>(&'a self, raw: &'a str) -> &'a str {
        self.alias.get(raw).map(String::as_str).unwrap_or(raw)
    }

    pub fn parent_of<'a>(&'a self, canonical: &str) -> &'a str {
        self.parent.get(canonical).map(String::as_str).unwrap_or(OTHER_CATEGORY)
    }

    /// Rewrites a record's labels through the alias and parent maps.
    pub fn apply(&self, raw_tags: &[String]) -> LabelSet {
        let mut second = Vec::new();
        for raw in raw_tags {
            let canon = self.canonicalize(raw).to_string();
            if !second.contains(&canon) {
                second.push(canon);
            }
        }
        let mut first = Vec::new();
        for canon in &second {
            let parent = self.parent_of(canon).to_string();
            if !first.contains(&parent) {
                first.push(parent);
            }
        }
        LabelSet { second_level: second, first_level: first }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("taxonomy serialization");
        crate::corpus::write_atomic(&bytes, path)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Lowercases, trims, and collapses internal whitespace.
pub fn normalize_tag(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Splits a tagger response into normalized, deduplicated tags.
pub fn parse_tags(response: &str, delimiter: &str, max_tags: usize) -> Vec<String> {
    let mut tags = Vec::new();
    for part in response.split(delimiter) {
        let tag = normalize_tag(part);
        if !tag.is_empty() && !tags.contains(&tag) {
            tags.push(tag);
        }
        if tags.len() == max_tags {
            break;
        }
    }
    tags
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggingOutcome {
    pub tags: Vec<String>,
    pub retried: bool,
    pub untaggable: bool,
}

fn tag_prompt(instruction: &str, cfg: &LabelSystemConfig) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system("[task:tag] You assign short capability tags to instructions."),
        ChatMessage::user(format!(
            "List 1 to {} short capability tags for the instruction below, separated by '{}', with no other text.\nInstruction:\n{}",
            cfg.max_tags, cfg.delimiter, instruction
        )),
    ]
}

/// Tags one record. A response that parses to zero tags is retried
/// (`cfg.retries` times, with a retry marker appended so the request differs)
/// and the record is flagged untaggable if every attempt fails. Hard gateway
/// errors (budget, transport) propagate.
pub fn tag_second_level(
    record: &InstructionRecord,
    gateway: &Gateway,
    cfg: &LabelSystemConfig,
) -> Result<TaggingOutcome, GatewayError> {
    let instruction = record.prompt_text();
    let mut retried = false;
    for attempt in 0..=cfg.retries {
        let mut messages = tag_prompt(&instruction, cfg);
        if attempt > 0 {
            retried = true;
            messages.push(ChatMessage::user(format!(
                "Attempt {}: reply with tags only, separated by '{}'.",
                attempt + 1,
                cfg.delimiter
            )));
        }
        let response = match gateway.complete_chat(&messages, GatewayRole::Tagger) {
            Ok(r) => r,
            Err(GatewayError::Parse(_)) => continue,
            Err(e) => return Err(e),
        };
        let tags = parse_tags(&response, &cfg.delimiter, cfg.max_tags);
        if !tags.is_empty() {
            return Ok(TaggingOutcome { tags, retried, untaggable: false });
        }
    }
    Ok(TaggingOutcome { tags: Vec::new(), retried, untaggable: true })
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// Seeded k-means with k-means++ initialization. Runs at most `max_iters`
/// iterations or until the relative inertia improvement drops below `tol`.
/// Deterministic for a fixed (points, k, seed).
pub fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> (Vec<usize>, f64) {
    assert!(k >= 1 && k <= points.len(), "kmeans called with invalid k");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();

    // k-means++ seeding.
    let mut centers: Vec<Vec<f32>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; pick uniformly.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centers.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let dim = points[0].len();
    let mut assignment = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iters {
        // Assign: nearest center, ties to the lowest center index.
        let mut new_inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
            new_inertia += best_d;
        }
        // Update.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (d, &x) in p.iter().enumerate() {
                sums[assignment[i]][d] += f64::from(x);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster with the point farthest from its
                // current center (deterministic: max distance, lowest index).
                let mut far_i = 0;
                let mut far_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    let d = squared_distance(p, &centers[assignment[i]]);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centers[c] = points[far_i].clone();
                assignment[far_i] = c;
            } else {
                for d in 0..dim {
                    centers[c][d] = (sums[c][d] / counts[c] as f64) as f32;
                }
            }
        }
        let improved = inertia.is_infinite() || (inertia - new_inertia) / inertia.max(1e-12) >= tol;
        inertia = new_inertia;
        if !improved {
            break;
        }
    }
    (assignment, inertia)
}

/// Clusters raw tags and names each cluster after its most frequent member
/// (ties break lexicographically). Manual overrides are merged afterward and
/// alias chains are flattened so the map is idempotent.
pub fn cluster_normalize(
    tag_counts: &BTreeMap<String, u64>,
    embeddings: &BTreeMap<String, Vec<f32>>,
    k: usize,
    seed: u64,
    overrides: &BTreeMap<String, String>,
) -> Result<(BTreeMap<String, String>, BTreeSet<String>), LabelError> {
    let tags: Vec<&String> = tag_counts.keys().collect();
    let n = tags.len();
    if k == 0 || k > n {
        return Err(LabelError::BadClusterCount { k, n });
    }
    let mut points = Vec::with_capacity(n);
    for tag in &tags {
        let emb = embeddings
            .get(*tag)
            .ok_or_else(|| LabelError::MissingEmbedding((*tag).clone()))?;
        points.push(emb.clone());
    }
    let (assignment, _) = kmeans(&points, k, seed, 100, 1e-4);

    let mut cluster_best: Vec<Option<&String>> = vec![None; k];
    for (i, &tag) in tags.iter().enumerate() {
        let c = assignment[i];
        cluster_best[c] = Some(match cluster_best[c] {
            None => tag,
            Some(best) => {
                let (bc, tc) = (tag_counts[best], tag_counts[tag]);
                if tc > bc || (tc == bc && tag < best) {
                    tag
                } else {
                    best
                }
            }
        });
    }

    let mut alias: BTreeMap<String, String> = BTreeMap::new();
    for (i, &tag) in tags.iter().enumerate() {
        let canonical = cluster_best[assignment[i]].expect("nonempty cluster has a best member");
        alias.insert(tag.clone(), canonical.clone());
    }
    for (raw, target) in overrides {
        alias.insert(normalize_tag(raw), normalize_tag(target));
    }
    // Flatten chains introduced by overrides so alias(alias(x)) == alias(x).
    let keys: Vec<String> = alias.keys().cloned().collect();
    for key in keys {
        let mut seen = BTreeSet::new();
        let mut cur = alias[&key].clone();
        while let Some(next) = alias.get(&cur) {
            if *next == cur {
                break;
            }
            if !seen.insert(cur.clone()) {
                return Err(LabelError::AliasCycle(key));
            }
            cur = next.clone();
        }
        alias.insert(key, cur);
    }
    let canonical: BTreeSet<String> = alias.values().cloned().collect();
    Ok((alias, canonical))
}

fn group_prompt(labels: &[&String], target: usize) -> Vec<ChatMessage> {
    let list: String = labels.iter().map(|l| format!("- {l}\n")).collect();
    vec![
        ChatMessage::system("[task:group] You organize capability labels into broad categories."),
        ChatMessage::user(format!(
            "Group the following capability labels into at most {target} broad first-level categories. \
             Respond with one line per label formatted exactly as 'label -> category'.\n{list}"
        )),
    ]
}

/// Asks the gateway to group canonical labels into at most `target`
/// categories. Labels the model skips fall into `Other`. If the model emits
/// more than `target` distinct categories, the overflow (in order of first
/// appearance) is folded into `Other`.
pub fn derive_first_level(
    canonical: &BTreeSet<String>,
    gateway: &Gateway,
    cfg: &LabelSystemConfig,
) -> Result<(BTreeMap<String, String>, usize), LabelError> {
    let mut parent: BTreeMap<String, String> = BTreeMap::new();
    let mut category_order: Vec<String> = Vec::new();
    let labels: Vec<&String> = canonical.iter().collect();
    for chunk in labels.chunks(cfg.group_chunk.max(1)) {
        let response =
            gateway.complete_chat(&group_prompt(chunk, cfg.first_level_target), GatewayRole::Tagger)?;
        for line in response.lines() {
            if let Some((label, category)) = line.split_once("->") {
                let label = normalize_tag(label);
                let category = category.trim().to_string();
                if canonical.contains(&label) && !category.is_empty() {
                    if !category_order.contains(&category) {
                        category_order.push(category.clone());
                    }
                    parent.entry(label).or_insert(category);
                }
            }
        }
    }
    let reserve_other = category_order.len() > cfg.first_level_target;
    let keep = if reserve_other { cfg.first_level_target.saturating_sub(1) } else { cfg.first_level_target };
    let kept: BTreeSet<&String> = category_order.iter().take(keep).collect();
    let mut uncovered = 0usize;
    for label in canonical {
        match parent.get(label) {
            Some(cat) if kept.contains(cat) => {}
            Some(_) => {
                parent.insert(label.clone(), OTHER_CATEGORY.to_string());
            }
            None => {
                parent.insert(label.clone(), OTHER_CATEGORY.to_string());
                uncovered += 1;
            }
        }
    }
    Ok((parent, uncovered))
}

/// Number of records carrying each canonical second-level label.
pub fn compute_label_frequencies<'a, I>(records: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a InstructionRecord>,
{
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for record in records {
        let mut seen = BTreeSet::new();
        for label in record.second_level_labels() {
            if seen.insert(label) {
                *freq.entry(label.clone()).or_insert(0) += 1;
            }
        }
    }
    freq
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelingStats {
    pub records: usize,
    pub tagged: usize,
    pub untaggable: usize,
    pub retried: usize,
    pub raw_tags: usize,
    pub canonical_labels: usize,
    pub first_level_categories: usize,
    pub uncovered_labels: usize,
}

/// Full labeling pass: tag every record, cluster the tag vocabulary, derive
/// first-level categories, and rewrite record labels through the taxonomy.
/// Untaggable records keep `labels: None`.
pub fn label_records(
    records: &mut [InstructionRecord],
    gateway: &Gateway,
    cfg: &LabelSystemConfig,
    seed: u64,
    overrides: &BTreeMap<String, String>,
) -> Result<(LabelTaxonomy, LabelingStats), LabelError> {
    let outcomes: Vec<TaggingOutcome> = records
        .par_iter()
        .map(|r| tag_second_level(r, gateway, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut stats = LabelingStats { records: records.len(), ..Default::default() };
    let mut tag_counts: BTreeMap<String, u64> = BTreeMap::new();
    for outcome in &outcomes {
        if outcome.untaggable {
            stats.untaggable += 1;
        } else {
            stats.tagged += 1;
        }
        if outcome.retried {
            stats.retried += 1;
        }
        let mut seen = BTreeSet::new();
        for tag in &outcome.tags {
            if seen.insert(tag) {
                *tag_counts.entry(tag.clone()).or_insert(0) += 1;
            }
        }
    }
    stats.raw_tags = tag_counts.len();

    if tag_counts.is_empty() {
        // Nothing tagged; empty taxonomy, all records unlabeled.
        return Ok((LabelTaxonomy::default(), stats));
    }

    let tags: Vec<String> = tag_counts.keys().cloned().collect();
    let vectors = gateway.embed_texts(&tags)?;
    let embeddings: BTreeMap<String, Vec<f32>> = tags.iter().cloned().zip(vectors).collect();

    let k = if cfg.cluster_count > 0 {
        cfg.cluster_count.min(tags.len())
    } else {
        ((tags.len() * 2) / 3).max(1)
    };
    let (alias, canonical) = cluster_normalize(&tag_counts, &embeddings, k, seed, overrides)?;
    stats.canonical_labels = canonical.len();

    let (parent, uncovered) = derive_first_level(&canonical, gateway, cfg)?;
    stats.uncovered_labels = uncovered;
    let first_level: BTreeSet<String> = parent.values().cloned().collect();
    stats.first_level_categories = first_level.len();

    let taxonomy = LabelTaxonomy { second_level: canonical, first_level, parent, alias };
    for (record, outcome) in records.iter_mut().zip(&outcomes) {
        record.labels = if outcome.untaggable { None } else { Some(taxonomy.apply(&outcome.tags)) };
    }
    Ok((taxonomy, stats))
}

//! High-quality seed selection from a labeled, scored dialog pool.
//!
//! Four criteria, applied in this order:
//! 1. Long-tail label frequency: any record carrying a label whose dataset
//!    frequency lies in `band_all` is retained outright; records whose labels
//!    all lie in `band_third` get a seeded one-in-three draw per label.
//!    Retained records bypass the score filters below.
//! 2. Multi-capability: records with at least `min_capabilities` distinct
//!    second-level labels are ordered first in the final truncation.
//! 3. Answer loss: keep the hardest records, those whose answer loss reaches
//!    the top `loss_keep_quantile` of the remainder (nearest-rank, ties kept).
//! 4. Convergence gap: drop the top `convergence_drop_quantile` of positive
//!    (answer_loss - post_tune_loss) gaps; a negative gap is never dropped.
//!
//! Records missing a required score are routed to a `missing_score` bucket
//! instead of silently passing or failing. All draws are hash-seeded, so the
//! outcome is a pure function of (dataset, frequencies, config, seed).

use crate::corpus::InstructionRecord;
use crate::manifest::{reason, ManifestRow};
use crate::util::hash_str;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFilterConfig {
    /// Inclusive frequency band whose records are all retained.
    #[serde(default = "default_band_all")]
    pub band_all: [u64; 2],
    /// Band (lo, hi]: lower exclusive, upper inclusive; one in
    /// `band_third_divisor` records per label retained.
    #[serde(default = "default_band_third")]
    pub band_third: [u64; 2],
    /// Integer divisor for the band draw: keep floor(n / divisor).
    #[serde(default = "default_divisor")]
    pub band_third_divisor: u64,
    /// Distinct second-level labels needed for priority ordering.
    #[serde(default = "default_min_caps")]
    pub min_capabilities: usize,
    /// Keep the top q of answer losses (0, 1].
    #[serde(default = "default_loss_q")]
    pub loss_keep_quantile: f64,
    /// Drop the top q of positive convergence gaps [0, 1).
    #[serde(default = "default_gap_q")]
    pub convergence_drop_quantile: f64,
    /// Final size cap; 0 means uncapped.
    #[serde(default)]
    pub target_size: usize,
    /// When target_size is 0, cap at ratio * input size (0 disables).
    #[serde(default = "default_target_ratio")]
    pub target_ratio: f64,
}

fn default_band_all() -> [u64; 2] {
    [20, 200]
}

fn default_band_third() -> [u64; 2] {
    [200, 500]
}

fn default_divisor() -> u64 {
    3
}

fn default_min_caps() -> usize {
    2
}

fn default_loss_q() -> f64 {
    0.5
}

fn default_gap_q() -> f64 {
    0.05
}

fn default_target_ratio() -> f64 {
    // Published pipeline kept 1.2M of 9M dialog instructions.
    1.2 / 9.0
}

impl Default for SeedFilterConfig {
    fn default() -> Self {
        SeedFilterConfig {
            band_all: default_band_all(),
            band_third: default_band_third(),
            band_third_divisor: default_divisor(),
            min_capabilities: default_min_caps(),
            loss_keep_quantile: default_loss_q(),
            convergence_drop_quantile: default_gap_q(),
            target_size: 0,
            target_ratio: default_target_ratio(),
        }
    }
}

impl SeedFilterConfig {
    pub fn resolved_target(&self, input: usize) -> Option<usize> {
        if self.target_size > 0 {
            Some(self.target_size)
        } else if self.target_ratio > 0.0 && self.target_ratio < 1.0 {
            Some(((input as f64) * self.target_ratio).round() as usize)
        } else {
            None
        }
    }

    fn in_band_all(&self, f: u64) -> bool {
        f >= self.band_all[0] && f <= self.band_all[1]
    }

    fn in_band_third(&self, f: u64) -> bool {
        f > self.band_third[0] && f <= self.band_third[1]
    }
}

/// Why a record was retained by the long-tail stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetainReason {
    BandAll,
    BandThird,
}

pub struct LongTailSplit {
    /// (index into input, reason)
    pub retained: Vec<(usize, RetainReason)>,
    pub remainder: Vec<usize>,
}

/// Long-tail partition. `frequencies` must be computed over this same
/// dataset. Retained and remainder are disjoint and cover the input.
pub fn partition_long_tail(
    records: &[InstructionRecord],
    frequencies: &BTreeMap<String, u64>,
    config: &SeedFilterConfig,
    seed: u64,
) -> LongTailSplit {
    let mut retained: Vec<(usize, RetainReason)> = Vec::new();
    let mut band_third_eligible: Vec<usize> = Vec::new();
    let mut remainder_set: HashSet<usize> = HashSet::new();

    for (i, r) in records.iter().enumerate() {
        let labels = r.second_level_labels();
        let freqs: Vec<u64> =
            labels.iter().map(|l| frequencies.get(l).copied().unwrap_or(0)).collect();
        if freqs.iter().any(|&f| config.in_band_all(f)) {
            retained.push((i, RetainReason::BandAll));
        } else if !freqs.is_empty() && freqs.iter().all(|&f| config.in_band_third(f)) {
            band_third_eligible.push(i);
        } else {
            remainder_set.insert(i);
        }
    }

    // Per-label draw over eligible members: keep floor(n / divisor) by seeded
    // hash rank of (label, id). A record drawn under any label is retained.
    let mut drawn: HashSet<usize> = HashSet::new();
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &band_third_eligible {
        for label in records[i].second_level_labels() {
            by_label.entry(label.as_str()).or_default().push(i);
        }
    }
    for (label, members) in by_label {
        let freq = frequencies.get(label).copied().unwrap_or(0);
        if !config.in_band_third(freq) {
            continue;
        }
        let keep = members.len() as u64 / config.band_third_divisor.max(1);
        if keep == 0 {
            continue;
        }
        let label_seed = hash_str(seed, label);
        let mut ranked: Vec<(u64, &str, usize)> =
            members.iter().map(|&i| (hash_str(label_seed, &records[i].id), records[i].id.as_str(), i)).collect();
        ranked.sort_unstable();
        for &(_, _, i) in ranked.iter().take(keep as usize) {
            drawn.insert(i);
        }
    }
    for &i in &band_third_eligible {
        if drawn.contains(&i) {
            retained.push((i, RetainReason::BandThird));
        } else {
            remainder_set.insert(i);
        }
    }
    retained.sort_by_key(|&(i, _)| i);
    let mut remainder: Vec<usize> = remainder_set.into_iter().collect();
    remainder.sort_unstable();
    LongTailSplit { retained, remainder }
}

/// True when the record has at least `min_caps` distinct second-level labels.
pub fn is_multi_capability(record: &InstructionRecord, min_caps: usize) -> bool {
    let distinct: BTreeSet<&String> = record.second_level_labels().iter().collect();
    distinct.len() >= min_caps
}

/// Nearest-rank count of the top-q items: ceil(q * n), computed with a small
/// epsilon so exact multiples stay exact.
fn top_quantile_count(q: f64, n: usize) -> usize {
    ((q * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn bottom_quantile_count(q: f64, n: usize) -> usize {
    ((q * n as f64) + 1e-9).floor().max(0.0) as usize
}

pub struct LossFilterOutcome {
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub missing: Vec<usize>,
    pub threshold: Option<f64>,
}

/// Keeps records whose answer loss is at or above the (1 - q) quantile:
/// the ceil(q * n) highest losses, with ties at the threshold kept.
pub fn filter_by_answer_loss(
    records: &[InstructionRecord],
    indices: &[usize],
    q: f64,
) -> LossFilterOutcome {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(indices.len());
    let mut missing = Vec::new();
    for &i in indices {
        match records[i].scores.as_ref().and_then(|s| s.answer_loss) {
            Some(loss) => scored.push((i, loss)),
            None => missing.push(i),
        }
    }
    if scored.is_empty() {
        return LossFilterOutcome { kept: Vec::new(), dropped: Vec::new(), missing, threshold: None };
    }
    let m = top_quantile_count(q, scored.len()).min(scored.len());
    if m == 0 {
        return LossFilterOutcome {
            kept: Vec::new(),
            dropped: scored.into_iter().map(|(i, _)| i).collect(),
            missing,
            threshold: None,
        };
    }
    let mut losses: Vec<f64> = scored.iter().map(|&(_, l)| l).collect();
    losses.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = losses[m - 1];
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, loss) in scored {
        if loss >= threshold {
            kept.push(i);
        } else {
            dropped.push(i);
        }
    }
    LossFilterOutcome { kept, dropped, missing, threshold: Some(threshold) }
}

pub struct GapFilterOutcome {
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub missing: Vec<usize>,
}

/// Drops the floor(q * n) largest positive convergence gaps
/// (answer_loss - post_tune_loss). Negative or zero gaps are never dropped.
pub fn filter_by_convergence_gap(
    records: &[InstructionRecord],
    indices: &[usize],
    q: f64,
) -> GapFilterOutcome {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(indices.len());
    let mut missing = Vec::new();
    for &i in indices {
        let s = records[i].scores.as_ref();
        match (s.and_then(|s| s.answer_loss), s.and_then(|s| s.post_tune_loss)) {
            (Some(a), Some(p)) => scored.push((i, a - p)),
            _ => missing.push(i),
        }
    }
    let m = bottom_quantile_count(q, scored.len()).min(scored.len());
    // Largest gaps first; ties break on record id for determinism.
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| records[a.0].id.cmp(&records[b.0].id))
    });
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for (rank, (i, gap)) in scored.into_iter().enumerate() {
        if rank < m && gap > 0.0 {
            dropped.push(i);
        } else {
            kept.push(i);
        }
    }
    GapFilterOutcome { kept, dropped, missing }
}

pub struct SeedSelection {
    pub seeds: Vec<InstructionRecord>,
    pub rows: Vec<ManifestRow>,
    pub retained_band: usize,
    pub truncated: usize,
}

/// Runs the full seed filter. Output ids are a pure function of
/// (records, frequencies, config, seed); the final truncation orders
/// multi-capability records first, then descending answer loss, then id.
pub fn select_seed_set(
    records: Vec<InstructionRecord>,
    frequencies: &BTreeMap<String, u64>,
    config: &SeedFilterConfig,
    seed: u64,
) -> SeedSelection {
    const STAGE: &str = "seed";
    let split = partition_long_tail(&records, frequencies, config, seed);

    let mut keep_reason: HashMap<usize, &'static str> = HashMap::new();
    for &(i, r) in &split.retained {
        keep_reason.insert(
            i,
            match r {
                RetainReason::BandAll => reason::LONG_TAIL_BAND_ALL,
                RetainReason::BandThird => reason::LONG_TAIL_BAND_THIRD,
            },
        );
    }

    let mut rows_dropped: Vec<(usize, &'static str)> = Vec::new();
    let loss_out = filter_by_answer_loss(&records, &split.remainder, config.loss_keep_quantile);
    for &i in &loss_out.missing {
        rows_dropped.push((i, reason::MISSING_SCORE));
    }
    for &i in &loss_out.dropped {
        rows_dropped.push((i, reason::BELOW_LOSS_QUANTILE));
    }
    let gap_out =
        filter_by_convergence_gap(&records, &loss_out.kept, config.convergence_drop_quantile);
    for &i in &gap_out.missing {
        rows_dropped.push((i, reason::MISSING_SCORE));
    }
    for &i in &gap_out.dropped {
        rows_dropped.push((i, reason::CONVERGENCE_GAP_DROP));
    }
    for &i in &gap_out.kept {
        keep_reason.insert(i, reason::KEPT);
    }

    // Union of band-retained and filtered remainder, truncated by priority.
    let mut survivors: Vec<usize> = keep_reason.keys().copied().collect();
    survivors.sort_by(|&a, &b| {
        let pa = is_multi_capability(&records[a], config.min_capabilities);
        let pb = is_multi_capability(&records[b], config.min_capabilities);
        pb.cmp(&pa)
            .then_with(|| {
                let la = records[a]
                    .scores
                    .as_ref()
                    .and_then(|s| s.answer_loss)
                    .unwrap_or(f64::NEG_INFINITY);
                let lb = records[b]
                    .scores
                    .as_ref()
                    .and_then(|s| s.answer_loss)
                    .unwrap_or(f64::NEG_INFINITY);
                lb.partial_cmp(&la).unwrap()
            })
            .then_with(|| records[a].id.cmp(&records[b].id))
    });
    let target = config.resolved_target(records.len()).unwrap_or(usize::MAX);
    let mut truncated = 0usize;
    if survivors.len() > target {
        for &i in &survivors[target..] {
            keep_reason.remove(&i);
            rows_dropped.push((i, reason::TRUNCATED_TARGET_SIZE));
            truncated += 1;
        }
        survivors.truncate(target);
    }

    let selected: HashSet<usize> = survivors.iter().copied().collect();
    let mut rows: Vec<ManifestRow> = Vec::with_capacity(records.len());
    let mut seeds: Vec<InstructionRecord> = Vec::with_capacity(survivors.len());
    let drop_map: HashMap<usize, &'static str> = rows_dropped.into_iter().collect();
    for (i, r) in records.into_iter().enumerate() {
        if selected.contains(&i) {
            let why = keep_reason[&i];
            let mut row = ManifestRow::kept(STAGE, r.id.clone(), why);
            if let Some(loss) = r.scores.as_ref().and_then(|s| s.answer_loss) {
                row = row.with_score(loss);
            }
            rows.push(row);
            seeds.push(r);
        } else {
            let why = drop_map.get(&i).copied().unwrap_or(reason::TRUNCATED_TARGET_SIZE);
            rows.push(ManifestRow::dropped(STAGE, r.id.clone(), why));
        }
    }
    // Seed output keeps dataset order; the assembly shuffle happens later.
    let retained_band = split.retained.len();
    SeedSelection { seeds, rows, retained_band, truncated }
}

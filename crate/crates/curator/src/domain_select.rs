//! Per-domain selection for the foundational dataset.
//!
//! Each domain runs its own strategy: importance resampling toward domain
//! target prompts (code, math), or source rules (knowledge drops denylisted
//! low-value sources, every source-rules domain caps exemplar-multiplied
//! duplicates). A gap report can trigger supplementation, which retries weak
//! domains with relaxed quotas and wider selection noise. Final assembly
//! merges the per-domain selections with the replayed seed set and applies a
//! deterministic global shuffle.

use crate::corpus::{Domain, InstructionRecord};
use crate::dsir::{fit_importance_model, gumbel_topk_resample, log_importance_weight, DsirError};
use crate::featurizer::{hash_ngram_features, FeaturizerConfig};
use crate::manifest::{reason, Decision, ManifestRow};
use crate::util::hash_str;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("domain {domain:?}: quota {quota} exceeds pool size {pool}")]
    QuotaExceedsPool { domain: Domain, quota: usize, pool: usize },
    #[error("dsir strategy for {0:?} requires target prompts")]
    MissingTargets(Domain),
    #[error("id collision across selections: {0:?}")]
    IdCollision(Vec<String>),
    #[error(transparent)]
    Dsir(#[from] DsirError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Drop denylisted sources, cap duplicated groups, uniform-sample to quota.
    SourceRules,
    /// Importance-resample toward target prompts.
    Dsir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPlan {
    pub strategy: SelectionStrategy,
    /// Fraction of the domain pool to keep; 1.0 keeps everything.
    #[serde(default = "default_ratio")]
    pub quota_ratio: f64,
    /// Absolute quota override; takes precedence over the ratio when > 0.
    #[serde(default)]
    pub quota: usize,
    /// Path to one-prompt-per-line target file (dsir strategy only).
    #[serde(default)]
    pub target_prompts: Option<String>,
    /// Sources dropped outright (match ignores case, '-', '_', ' ', '.').
    #[serde(default)]
    pub denylist: Vec<String>,
    /// Max records kept per near-identical instruction group.
    #[serde(default = "default_group_cap")]
    pub max_per_group: usize,
    /// Supplementation bookkeeping: starts at 0, bumped per relaxation pass.
    #[serde(default)]
    pub relaxation_level: u32,
}

fn default_ratio() -> f64 {
    1.0
}

fn default_group_cap() -> usize {
    2
}

impl DomainPlan {
    pub fn source_rules() -> Self {
        DomainPlan {
            strategy: SelectionStrategy::SourceRules,
            quota_ratio: 1.0,
            quota: 0,
            target_prompts: None,
            denylist: Vec::new(),
            max_per_group: default_group_cap(),
            relaxation_level: 0,
        }
    }

    pub fn dsir(targets: &str, quota_ratio: f64) -> Self {
        DomainPlan {
            strategy: SelectionStrategy::Dsir,
            quota_ratio,
            quota: 0,
            target_prompts: Some(targets.to_string()),
            denylist: Vec::new(),
            max_per_group: default_group_cap(),
            relaxation_level: 0,
        }
    }

    pub fn effective_quota(&self, pool: usize) -> usize {
        if self.quota > 0 {
            self.quota.min(pool)
        } else {
            ((pool as f64) * self.quota_ratio.clamp(0.0, 1.0)).round() as usize
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapVerdict {
    Gap,
    Saturated,
}

/// Ability gap report: which domains need supplementation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub domains: BTreeMap<Domain, GapEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub verdict: GapVerdict,
    #[serde(default)]
    pub note: String,
}

impl GapReport {
    pub fn load(path: &Path) -> io::Result<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn gap_domains(&self) -> Vec<Domain> {
        self.domains
            .iter()
            .filter(|(_, e)| e.verdict == GapVerdict::Gap)
            .map(|(d, _)| *d)
            .collect()
    }
}

fn normalize_source(source: &str) -> String {
    source
        .chars()
        .filter(|c| !matches!(c, '-' | '_' | ' ' | '.'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Splits records into (kept, dropped) by source denylist. Matching is
/// normalized so "SST-2" and "sst2" denylist entries hit the same sources.
pub fn filter_knowledge_sources(
    records: Vec<InstructionRecord>,
    denylist: &[String],
) -> (Vec<InstructionRecord>, Vec<InstructionRecord>) {
    let deny: HashSet<String> = denylist.iter().map(|s| normalize_source(s)).collect();
    if deny.is_empty() {
        return (records, Vec::new());
    }
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for r in records {
        if deny.contains(&normalize_source(&r.source)) {
            dropped.push(r);
        } else {
            kept.push(r);
        }
    }
    (kept, dropped)
}

const GROUP_KEY_TOKENS: usize = 64;

/// Key for exemplar-multiplied duplicate capping: the first tokens of the
/// normalized first human turn.
pub fn augment_group_key(record: &InstructionRecord) -> String {
    let first_human = record
        .conversations
        .iter()
        .find(|t| t.role == crate::corpus::Role::Human)
        .map(|t| t.content.as_str())
        .unwrap_or("");
    let tokens = crate::featurizer::tokenize(first_human);
    tokens.iter().take(GROUP_KEY_TOKENS).cloned().collect::<Vec<_>>().join(" ")
}

/// Keeps at most `max_per_group` records per instruction group, in stream
/// order.
pub fn dedup_augmented(
    records: Vec<InstructionRecord>,
    max_per_group: usize,
) -> (Vec<InstructionRecord>, Vec<InstructionRecord>) {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for r in records {
        let key = augment_group_key(&r);
        let n = counts.entry(key).or_insert(0);
        if *n < max_per_group.max(1) {
            *n += 1;
            kept.push(r);
        } else {
            dropped.push(r);
        }
    }
    (kept, dropped)
}

/// Reads target prompts, one per line, skipping blanks.
pub fn load_target_prompts(path: &Path) -> io::Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

#[derive(Debug)]
pub struct DomainSelection {
    pub domain: Domain,
    pub selected: Vec<InstructionRecord>,
    pub rows: Vec<ManifestRow>,
}

/// Importance-resamples `quota` records from the pool toward the target
/// prompts. Selected records carry their log weight in `scores`.
#[allow(clippy::too_many_arguments)]
pub fn dsir_select_domain(
    domain: Domain,
    pool: Vec<InstructionRecord>,
    target_prompts: &[String],
    quota: usize,
    featurizer: &FeaturizerConfig,
    alpha: f64,
    raw_sample_cap: usize,
    seed: u64,
    noise_scale: f64,
    stage: &str,
) -> Result<DomainSelection, SelectError> {
    if quota > pool.len() {
        return Err(SelectError::QuotaExceedsPool { domain, quota, pool: pool.len() });
    }
    if target_prompts.is_empty() {
        return Err(SelectError::MissingTargets(domain));
    }
    let features: Vec<_> = pool
        .par_iter()
        .map(|r| {
            let text = if featurizer.prompt_only { r.prompt_text() } else { r.full_text() };
            hash_ngram_features(&text, featurizer)
        })
        .collect();
    let model = fit_importance_model(
        target_prompts.par_iter().map(|p| hash_ngram_features(p, featurizer)).collect::<Vec<_>>(),
        features.iter().cloned(),
        alpha,
        featurizer.buckets,
        raw_sample_cap,
        seed,
    )?;
    let weights: Vec<f64> =
        features.par_iter().map(|f| log_importance_weight(&model, f)).collect();
    let chosen = gumbel_topk_resample(&weights, quota, seed ^ hash_str(0, domain.as_str()), noise_scale)?;
    let chosen_set: HashSet<usize> = chosen.iter().copied().collect();

    let mut selected = Vec::with_capacity(quota);
    let mut rows = Vec::with_capacity(pool.len());
    for (i, mut r) in pool.into_iter().enumerate() {
        if chosen_set.contains(&i) {
            r.scores_mut().log_importance_weight = Some(weights[i]);
            rows.push(ManifestRow::kept(stage, r.id.clone(), reason::KEPT).with_score(weights[i]));
            selected.push(r);
        } else {
            rows.push(
                ManifestRow::dropped(stage, r.id.clone(), reason::NOT_SELECTED_DSIR)
                    .with_score(weights[i]),
            );
        }
    }
    Ok(DomainSelection { domain, selected, rows })
}

/// Uniform quota sample by seeded hash rank over record ids: independent of
/// input order, no RNG stream.
fn uniform_quota(
    records: Vec<InstructionRecord>,
    quota: usize,
    seed: u64,
) -> (Vec<InstructionRecord>, Vec<InstructionRecord>) {
    if quota >= records.len() {
        return (records, Vec::new());
    }
    let mut ranked: Vec<(u64, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (hash_str(seed, &r.id), i))
        .collect();
    ranked.sort_unstable();
    let keep_idx: HashSet<usize> = ranked[..quota].iter().map(|&(_, i)| i).collect();
    let mut kept = Vec::with_capacity(quota);
    let mut dropped = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        if keep_idx.contains(&i) {
            kept.push(r);
        } else {
            dropped.push(r);
        }
    }
    (kept, dropped)
}

/// Runs one domain's plan over its pool.
#[allow(clippy::too_many_arguments)]
pub fn select_domain(
    domain: Domain,
    plan: &DomainPlan,
    pool: Vec<InstructionRecord>,
    featurizer: &FeaturizerConfig,
    alpha: f64,
    raw_sample_cap: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<DomainSelection, SelectError> {
    let stage = format!("select_{}", domain.as_str());
    match plan.strategy {
        SelectionStrategy::Dsir => {
            let path = plan
                .target_prompts
                .as_deref()
                .filter(|p| !p.is_empty())
                .ok_or(SelectError::MissingTargets(domain))?;
            let prompts = load_target_prompts(Path::new(path))?;
            let quota = plan.effective_quota(pool.len());
            dsir_select_domain(
                domain,
                pool,
                &prompts,
                quota,
                featurizer,
                alpha,
                raw_sample_cap,
                seed,
                noise_scale,
                &stage,
            )
        }
        SelectionStrategy::SourceRules => {
            let mut rows = Vec::with_capacity(pool.len());
            let (kept, denied) = filter_knowledge_sources(pool, &plan.denylist);
            for r in &denied {
                rows.push(ManifestRow::dropped(&stage, r.id.clone(), reason::LOW_KNOWLEDGE_SOURCE));
            }
            let (kept, dup) = dedup_augmented(kept, plan.max_per_group);
            for r in &dup {
                rows.push(ManifestRow::dropped(&stage, r.id.clone(), reason::AUGMENTED_DUPLICATE));
            }
            let quota = plan.effective_quota(kept.len());
            let (kept, over) = uniform_quota(kept, quota, seed ^ hash_str(1, domain.as_str()));
            for r in &over {
                rows.push(ManifestRow::dropped(&stage, r.id.clone(), reason::NOT_SELECTED_UNIFORM));
            }
            for r in &kept {
                rows.push(ManifestRow::kept(&stage, r.id.clone(), reason::KEPT));
            }
            Ok(DomainSelection { domain, selected: kept, rows })
        }
    }
}

/// Supplementation pass for domains the gap report flags: quota grows 1.5x,
/// selection noise widens 1.25x per relaxation level, and extra records are
/// drawn from the still-unselected remainder. Never errors on a thin pool;
/// it takes what exists and reports the shortfall in the rows.
#[allow(clippy::too_many_arguments)]
pub fn supplement_weak_domain(
    domain: Domain,
    plan: &DomainPlan,
    pool_remainder: Vec<InstructionRecord>,
    already_selected: usize,
    featurizer: &FeaturizerConfig,
    alpha: f64,
    raw_sample_cap: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<DomainSelection, SelectError> {
    let level = plan.relaxation_level + 1;
    let growth = 1.5f64.powi(level as i32);
    let widened_noise = noise_scale * 1.25f64.powi(level as i32);
    let base_quota = plan.effective_quota(already_selected + pool_remainder.len());
    let target_total = ((base_quota as f64) * growth).round() as usize;
    let extra = target_total.saturating_sub(already_selected).min(pool_remainder.len());
    let stage = format!("supplement_{}", domain.as_str());

    if extra == 0 || pool_remainder.is_empty() {
        let rows = pool_remainder
            .iter()
            .map(|r| ManifestRow::dropped(&stage, r.id.clone(), reason::NOT_SELECTED_UNIFORM))
            .collect();
        return Ok(DomainSelection { domain, selected: Vec::new(), rows });
    }

    let mut selection = match plan.strategy {
        SelectionStrategy::Dsir => {
            let path = plan
                .target_prompts
                .as_deref()
                .filter(|p| !p.is_empty())
                .ok_or(SelectError::MissingTargets(domain))?;
            let prompts = load_target_prompts(Path::new(path))?;
            dsir_select_domain(
                domain,
                pool_remainder,
                &prompts,
                extra,
                featurizer,
                alpha,
                raw_sample_cap,
                seed ^ u64::from(level),
                widened_noise,
                &stage,
            )?
        }
        SelectionStrategy::SourceRules => {
            let mut rows = Vec::new();
            let (kept, over) =
                uniform_quota(pool_remainder, extra, seed ^ hash_str(2, domain.as_str()) ^ u64::from(level));
            for r in &over {
                rows.push(ManifestRow::dropped(&stage, r.id.clone(), reason::NOT_SELECTED_UNIFORM));
            }
            for r in &kept {
                rows.push(ManifestRow::kept(&stage, r.id.clone(), reason::KEPT));
            }
            DomainSelection { domain, selected: kept, rows }
        }
    };
    // Supplemented records are tagged so the manifest distinguishes them.
    for row in &mut selection.rows {
        if row.decision == Decision::Kept {
            row.reason = reason::WEAK_DOMAIN_SUPPLEMENT.to_string();
        }
    }
    for r in &mut selection.selected {
        r.meta.insert("supplement_level".into(), serde_json::Value::from(level));
    }
    Ok(selection)
}

/// Merges per-domain selections with the replayed seed set, enforcing id
/// disjointness, then applies a deterministic global shuffle keyed by the
/// run seed.
pub fn assemble_foundational(
    selections: Vec<DomainSelection>,
    seed_replay: Vec<InstructionRecord>,
    run_seed: u64,
) -> Result<(Vec<InstructionRecord>, Vec<ManifestRow>), SelectError> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut collisions: Vec<String> = Vec::new();
    let mut merged: Vec<InstructionRecord> = Vec::new();
    let mut rows = Vec::new();
    for sel in selections {
        for r in sel.selected {
            if seen.insert(r.id.clone()) {
                rows.push(ManifestRow::kept("assemble", r.id.clone(), reason::KEPT));
                merged.push(r);
            } else {
                collisions.push(r.id);
            }
        }
    }
    for r in seed_replay {
        if seen.insert(r.id.clone()) {
            rows.push(ManifestRow::kept("assemble", r.id.clone(), reason::SEED_REPLAY));
            merged.push(r);
        } else {
            collisions.push(r.id);
        }
    }
    if !collisions.is_empty() {
        collisions.sort();
        collisions.dedup();
        return Err(SelectError::IdCollision(collisions));
    }
    crate::util::shuffle_by_key(&mut merged, run_seed ^ 0x6173_6d62, |r| r.id.clone());
    Ok((merged, rows))
}

//! Per-record selection manifests.
//!
//! Every stage accounts for 100% of its input: each record id gets exactly
//! one row with a kept/dropped decision and a reason code. Manifests are
//! JSONL per stage plus an aggregate summary.

use crate::corpus::write_lines;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Kept,
    Dropped,
}

/// Reason codes used across stages. Dropped rows carry exactly one.
pub mod reason {
    pub const KEPT: &str = "kept";
    pub const REJECTED_SCHEMA: &str = "rejected_schema";
    pub const LOW_KNOWLEDGE_SOURCE: &str = "low_knowledge_source";
    pub const AUGMENTED_DUPLICATE: &str = "augmented_duplicate";
    pub const NOT_SELECTED_DSIR: &str = "not_selected_dsir";
    pub const NOT_SELECTED_UNIFORM: &str = "not_selected_uniform";
    pub const WEAK_DOMAIN_SUPPLEMENT: &str = "weak_domain_supplement";
    pub const SEED_REPLAY: &str = "seed_replay";
    pub const LONG_TAIL_BAND_ALL: &str = "long_tail_band_all";
    pub const LONG_TAIL_BAND_THIRD: &str = "long_tail_band_third";
    pub const BELOW_LOSS_QUANTILE: &str = "below_loss_quantile";
    pub const CONVERGENCE_GAP_DROP: &str = "convergence_gap_drop";
    pub const MISSING_SCORE: &str = "missing_score";
    pub const TRUNCATED_TARGET_SIZE: &str = "truncated_target_size";
    pub const NO_DOMAIN_PLAN: &str = "no_domain_plan";
    pub const UNTAGGABLE: &str = "untaggable";
    pub const EVOLVED_ACCEPTED: &str = "evolved_accepted";
    pub const EVOLVE_UNCHANGED: &str = "semantically_unchanged";
    pub const EVOLVE_HARMFUL: &str = "harmful";
    pub const EVOLVE_MALFORMED: &str = "malformed";
    pub const NEAR_DUPLICATE: &str = "near_duplicate";
    pub const CONTAMINATED: &str = "contaminated";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub stage: String,
    pub decision: Decision,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ManifestRow {
    pub fn kept(stage: &str, id: impl Into<String>, reason: &str) -> Self {
        ManifestRow {
            id: id.into(),
            stage: stage.to_string(),
            decision: Decision::Kept,
            reason: reason.to_string(),
            score: None,
        }
    }

    pub fn dropped(stage: &str, id: impl Into<String>, reason: &str) -> Self {
        ManifestRow {
            id: id.into(),
            stage: stage.to_string(),
            decision: Decision::Dropped,
            reason: reason.to_string(),
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub input: u64,
    pub kept: u64,
    pub dropped: u64,
    pub reasons: BTreeMap<String, u64>,
}

pub fn summarize(rows: &[ManifestRow]) -> StageSummary {
    let mut s = StageSummary { input: rows.len() as u64, ..Default::default() };
    for row in rows {
        match row.decision {
            Decision::Kept => s.kept += 1,
            Decision::Dropped => s.dropped += 1,
        }
        *s.reasons.entry(row.reason.clone()).or_insert(0) += 1;
    }
    s
}

/// Writes one JSONL manifest per stage under a fixed directory.
pub struct ManifestWriter {
    dir: PathBuf,
    pub summaries: BTreeMap<String, StageSummary>,
}

impl ManifestWriter {
    pub fn new(dir: PathBuf) -> Self {
        ManifestWriter { dir, summaries: BTreeMap::new() }
    }

    /// Writes the stage manifest atomically and folds its summary in.
    /// Panics in debug builds if a record id appears twice in one stage.
    pub fn write_stage(&mut self, stage: &str, rows: &[ManifestRow]) -> io::Result<StageSummary> {
        #[cfg(debug_assertions)]
        {
            let mut seen = std::collections::HashSet::with_capacity(rows.len());
            for row in rows {
                debug_assert!(seen.insert(&row.id), "duplicate manifest row for {} in {stage}", row.id);
            }
        }
        let lines: Vec<String> =
            rows.iter().map(|r| serde_json::to_string(r).expect("manifest row")).collect();
        write_lines(lines.iter(), &self.dir.join(format!("{stage}.jsonl")))?;
        let summary = summarize(rows);
        self.summaries.insert(stage.to_string(), summary.clone());
        Ok(summary)
    }
}

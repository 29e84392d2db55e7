//! Reward-prioritized, label-balanced subset sampling.
//!
//! Produces one global selection order: labels rotate round-robin (rotation
//! order is a seeded shuffle), and each label yields its best remaining
//! record by (reward desc, id asc). A subset of size n is the first n slots
//! of that order, so ladder rungs are nested by construction.

use crate::corpus::{write_dataset, InstructionRecord};
use crate::util::shuffle_by_key;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("record {id} has no second-level labels")]
    MissingLabel { id: String },
    #[error("record {id} has no reward score")]
    MissingReward { id: String },
    #[error("requested size {size} exceeds {available} available records")]
    SizeTooLarge { size: usize, available: usize },
    #[error("ladder sizes must be positive")]
    ZeroSize,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One position in the selection order: which record, and the label whose
/// rotation turn drew it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SelectionSlot {
    pub index: usize,
    pub label: String,
}

/// Full selection order over the dataset; a permutation of all indices.
pub fn selection_order(
    records: &[InstructionRecord],
    seed: u64,
) -> Result<Vec<SelectionSlot>, SampleError> {
    let mut rewards = Vec::with_capacity(records.len());
    for r in records {
        if r.second_level_labels().is_empty() {
            return Err(SampleError::MissingLabel { id: r.id.clone() });
        }
        match r.scores.as_ref().and_then(|s| s.reward) {
            Some(w) => rewards.push(w),
            None => return Err(SampleError::MissingReward { id: r.id.clone() }),
        }
    }

    let mut queues: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        for l in r.second_level_labels() {
            queues.entry(l.as_str()).or_default().push(i);
        }
    }
    for q in queues.values_mut() {
        q.sort_by(|&a, &b| {
            rewards[b]
                .partial_cmp(&rewards[a])
                .unwrap()
                .then_with(|| records[a].id.cmp(&records[b].id))
        });
    }

    let mut rotation: Vec<&str> = queues.keys().copied().collect();
    shuffle_by_key(&mut rotation, seed, |l| l.to_string());

    let mut taken = vec![false; records.len()];
    let mut cursors: HashMap<&str, usize> = HashMap::new();
    let mut order = Vec::with_capacity(records.len());
    while order.len() < records.len() {
        let mut progressed = false;
        for &label in &rotation {
            let queue = &queues[label];
            let cursor = cursors.entry(label).or_insert(0);
            while *cursor < queue.len() && taken[queue[*cursor]] {
                *cursor += 1;
            }
            if *cursor < queue.len() {
                let idx = queue[*cursor];
                taken[idx] = true;
                *cursor += 1;
                order.push(SelectionSlot { index: idx, label: label.to_string() });
                progressed = true;
            }
        }
        // Every record carries a label, so a full pass always advances.
        debug_assert!(progressed || order.len() == records.len());
        if !progressed {
            break;
        }
    }
    Ok(order)
}

/// The n highest-priority records under the balanced reward order.
pub fn reward_prioritized_sample(
    records: &[InstructionRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<SelectionSlot>, SampleError> {
    if n > records.len() {
        return Err(SampleError::SizeTooLarge { size: n, available: records.len() });
    }
    let mut order = selection_order(records, seed)?;
    order.truncate(n);
    Ok(order)
}

#[derive(Debug, Serialize)]
pub struct LadderRung {
    pub size: usize,
    /// File name within the output directory (kept relative so reports stay
    /// byte-identical regardless of where the run directory lives).
    pub file: String,
    /// How many records each label contributed to this rung.
    pub per_label: BTreeMap<String, usize>,
    pub mean_reward: f64,
}

#[derive(Debug, Serialize)]
pub struct LadderReport {
    pub seed: u64,
    pub total_records: usize,
    pub rungs: Vec<LadderRung>,
}

/// Writes `ladder-<size>.jsonl` for each requested size. Rungs are prefixes
/// of one order, so smaller rungs are strict subsets of larger ones.
pub fn emit_size_ladder(
    records: &[InstructionRecord],
    sizes: &[usize],
    seed: u64,
    out_dir: &Path,
) -> Result<LadderReport, SampleError> {
    for &s in sizes {
        if s == 0 {
            return Err(SampleError::ZeroSize);
        }
        if s > records.len() {
            return Err(SampleError::SizeTooLarge { size: s, available: records.len() });
        }
    }
    let order = selection_order(records, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let mut sorted_sizes: Vec<usize> = sizes.to_vec();
    sorted_sizes.sort_unstable();
    sorted_sizes.dedup();

    let mut rungs = Vec::with_capacity(sorted_sizes.len());
    for size in sorted_sizes {
        let slots = &order[..size];
        let file = format!("ladder-{size}.jsonl");
        write_dataset(slots.iter().map(|s| &records[s.index]), &out_dir.join(&file))?;
        let mut per_label: BTreeMap<String, usize> = BTreeMap::new();
        let mut reward_sum = 0.0;
        for slot in slots {
            *per_label.entry(slot.label.clone()).or_insert(0) += 1;
            reward_sum +=
                records[slot.index].scores.as_ref().and_then(|s| s.reward).unwrap_or(0.0);
        }
        rungs.push(LadderRung { size, file, per_label, mean_reward: reward_sum / size as f64 });
    }
    Ok(LadderReport { seed, total_records: records.len(), rungs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_dataset, Domain, LabelSet, Role, ScoreSet, Turn};
    use std::collections::HashSet;

    fn rec(id: &str, labels: &[&str], reward: Option<f64>) -> InstructionRecord {
        let mut r = InstructionRecord::new(
            id,
            "unit",
            Domain::Chat,
            vec![Turn::new(Role::Human, format!("q {id}")), Turn::new(Role::Assistant, "a")],
        );
        r.labels = Some(LabelSet {
            second_level: labels.iter().map(|s| s.to_string()).collect(),
            first_level: vec![],
        });
        if let Some(w) = reward {
            r.scores = Some(ScoreSet { reward: Some(w), ..Default::default() });
        }
        r
    }

    #[test]
    fn test_missing_label_and_reward_rejected() {
        let no_label = rec("x", &[], Some(1.0));
        assert!(matches!(
            selection_order(&[no_label], 0),
            Err(SampleError::MissingLabel { .. })
        ));
        let no_reward = rec("y", &["a"], None);
        assert!(matches!(
            selection_order(&[no_reward], 0),
            Err(SampleError::MissingReward { .. })
        ));
    }

    #[test]
    fn test_balanced_top_rewards_per_label() {
        let records = vec![
            rec("a1", &["alpha"], Some(10.0)),
            rec("a2", &["alpha"], Some(9.0)),
            rec("a3", &["alpha"], Some(8.0)),
            rec("b1", &["beta"], Some(7.0)),
            rec("b2", &["beta"], Some(6.0)),
        ];
        let sample = reward_prioritized_sample(&records, 4, 1).unwrap();
        let mut by_label: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for slot in &sample {
            by_label.entry(slot.label.as_str()).or_default().push(records[slot.index].id.as_str());
        }
        assert_eq!(by_label["alpha"], vec!["a1", "a2"]);
        assert_eq!(by_label["beta"], vec!["b1", "b2"]);
    }

    #[test]
    fn test_order_is_permutation_and_multilabel_drawn_once() {
        let records = vec![
            rec("m", &["alpha", "beta"], Some(100.0)),
            rec("a1", &["alpha"], Some(5.0)),
            rec("b1", &["beta"], Some(4.0)),
            rec("b2", &["beta"], Some(3.0)),
        ];
        let order = selection_order(&records, 7).unwrap();
        let indices: HashSet<usize> = order.iter().map(|s| s.index).collect();
        assert_eq!(order.len(), records.len());
        assert_eq!(indices.len(), records.len());
    }

    #[test]
    fn test_reward_tie_breaks_on_id() {
        let records = vec![
            rec("zed", &["l"], Some(5.0)),
            rec("abe", &["l"], Some(5.0)),
        ];
        let order = selection_order(&records, 0).unwrap();
        assert_eq!(records[order[0].index].id, "abe");
    }

    #[test]
    fn test_deterministic_per_seed() {
        let records: Vec<_> = (0..30)
            .map(|i| {
                rec(
                    &format!("r{i}"),
                    &[if i % 3 == 0 { "a" } else { "b" }],
                    Some((i % 7) as f64),
                )
            })
            .collect();
        let o1 = selection_order(&records, 42).unwrap();
        let o2 = selection_order(&records, 42).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn test_size_too_large() {
        let records = vec![rec("a", &["l"], Some(1.0))];
        assert!(matches!(
            reward_prioritized_sample(&records, 2, 0),
            Err(SampleError::SizeTooLarge { size: 2, available: 1 })
        ));
    }

    #[test]
    fn test_ladder_rungs_nested_and_counted() {
        let tmp = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..20)
            .map(|i| {
                rec(
                    &format!("r{i:02}"),
                    &[if i % 2 == 0 { "even" } else { "odd" }],
                    Some(i as f64),
                )
            })
            .collect();
        let report = emit_size_ladder(&records, &[12, 4], 3, tmp.path()).unwrap();
        assert_eq!(report.rungs.len(), 2);
        assert_eq!(report.rungs[0].size, 4);
        assert_eq!(report.rungs[1].size, 12);
        for rung in &report.rungs {
            let total: usize = rung.per_label.values().sum();
            assert_eq!(total, rung.size);
        }
        let (small, _) = read_dataset(&tmp.path().join(&report.rungs[0].file)).unwrap();
        let (large, _) = read_dataset(&tmp.path().join(&report.rungs[1].file)).unwrap();
        let small_ids: HashSet<String> = small.iter().map(|r| r.id.clone()).collect();
        let large_ids: HashSet<String> = large.iter().map(|r| r.id.clone()).collect();
        assert!(small_ids.is_subset(&large_ids));
        // Balanced rotation: each label contributes half of each rung.
        assert_eq!(report.rungs[0].per_label["even"], 2);
        assert_eq!(report.rungs[0].per_label["odd"], 2);
    }

    #[test]
    fn test_ladder_rejects_zero_and_oversize() {
        let records = vec![rec("a", &["l"], Some(1.0))];
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_size_ladder(&records, &[0], 0, tmp.path()),
            Err(SampleError::ZeroSize)
        ));
        assert!(matches!(
            emit_size_ladder(&records, &[5], 0, tmp.path()),
            Err(SampleError::SizeTooLarge { .. })
        ));
    }
}

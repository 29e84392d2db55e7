//! Property-based tests for the deterministic primitives: hashing,
//! shuffling, resampling, featurization, and partition laws.

use curator::config::RunConfig;
use curator::corpus::{turn_stats, Domain, InstructionRecord, LabelSet, Role, Turn};
use curator::dsir::gumbel_topk_resample;
use curator::featurizer::{
    fit_bucket_distribution, hash_ngram_features, kl_divergence, FeaturizerConfig,
};
use curator::label_system::compute_label_frequencies;
use curator::seed_filter::{partition_long_tail, SeedFilterConfig};
use curator::util::{gumbel, hash_str, shuffle_by_key, unit_f64};
use proptest::prelude::*;
use std::collections::{BTreeMap, HashSet};

/// Token count the way the featurizer sees it: maximal alphanumeric runs.
/// Lowercasing can expand characters but never merges or splits runs.
fn token_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_run = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_run {
                count += 1;
                in_run = true;
            }
        } else {
            in_run = false;
        }
    }
    count
}

fn tiny_record(id: String, labels: Vec<String>, assistant_turns: usize) -> InstructionRecord {
    let mut conv = Vec::new();
    for t in 0..assistant_turns.max(1) {
        conv.push(Turn::new(Role::Human, format!("q {id} {t}")));
        conv.push(Turn::new(Role::Assistant, format!("a {id} {t}")));
    }
    let mut r = InstructionRecord::new(id, "prop", Domain::Chat, conv);
    r.labels = Some(LabelSet { second_level: labels, first_level: vec![] });
    r
}

proptest! {
    /// The hash-to-unit mapping stays strictly inside the open interval, so
    /// ln(u) and ln(-ln(u)) never hit an infinity.
    #[test]
    fn unit_interval_is_open(h: u64) {
        let u = unit_f64(h);
        prop_assert!(u > 0.0 && u < 1.0, "unit_f64({h}) = {u}");
        prop_assert!(gumbel(h).is_finite());
    }

    /// Seeded string hashing is a pure function with no interior state.
    #[test]
    fn string_hash_is_deterministic(seed: u64, s in ".{0,64}") {
        prop_assert_eq!(hash_str(seed, &s), hash_str(seed, &s));
    }

    /// Seeded shuffling permutes: same multiset, deterministic order.
    #[test]
    fn shuffle_is_a_permutation(seed: u64, mut items in prop::collection::vec(".{0,12}", 0..40)) {
        let mut sorted_before = items.clone();
        sorted_before.sort();
        let mut again = items.clone();
        shuffle_by_key(&mut items, seed, |s: &String| s.clone());
        shuffle_by_key(&mut again, seed, |s: &String| s.clone());
        prop_assert_eq!(&items, &again, "same seed must give the same order");
        let mut sorted_after = items;
        sorted_after.sort();
        prop_assert_eq!(sorted_before, sorted_after);
    }

    /// Resampling returns exactly k distinct in-range indices, ascending;
    /// k == n returns everything.
    #[test]
    fn resample_output_is_a_sorted_k_subset(
        seed: u64,
        weights in prop::collection::vec(-40.0f64..40.0, 1..60),
        k_frac in 0.0f64..1.0,
    ) {
        let n = weights.len();
        let k = ((k_frac * n as f64) as usize).min(n);
        let picked = gumbel_topk_resample(&weights, k, seed, 1.0).unwrap();
        prop_assert_eq!(picked.len(), k);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]), "not strictly ascending");
        prop_assert!(picked.iter().all(|&i| i < n));
        let all = gumbel_topk_resample(&weights, n, seed, 1.0).unwrap();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    /// Gumbel noise from the unit-open interval is bounded by roughly ±37,
    /// so a large enough weight advantage always wins the resample.
    #[test]
    fn resample_respects_dominant_weight(
        seed: u64,
        mut weights in prop::collection::vec(-1.0f64..1.0, 1..50),
        winner_frac in 0.0f64..1.0,
    ) {
        let winner = ((winner_frac * weights.len() as f64) as usize).min(weights.len() - 1);
        weights[winner] = 1000.0;
        let picked = gumbel_topk_resample(&weights, 1, seed, 1.0).unwrap();
        prop_assert_eq!(picked, vec![winner]);
    }

    /// Smoothed bucket fits are genuine probability distributions, and KL is
    /// non-negative with KL(p ‖ p) = 0.
    #[test]
    fn bucket_fit_is_a_distribution(
        texts in prop::collection::vec("[a-z ]{0,40}", 0..12),
        other in prop::collection::vec("[a-z ]{0,40}", 0..12),
    ) {
        let cfg = FeaturizerConfig { buckets: 64, ..Default::default() };
        let feats = |ts: &[String]| ts.iter().map(|t| hash_ngram_features(t, &cfg)).collect::<Vec<_>>();
        let p = fit_bucket_distribution(feats(&texts), 0.5, cfg.buckets).unwrap();
        let q = fit_bucket_distribution(feats(&other), 0.5, cfg.buckets).unwrap();
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
    }

    /// The featurizer emits one count per n-gram occurrence: with unigrams
    /// and bigrams that is n + max(n-1, 0) for n tokens.
    #[test]
    fn feature_totals_count_ngram_occurrences(text in ".{0,80}") {
        let cfg = FeaturizerConfig::default();
        prop_assert_eq!(&cfg.ngram_orders, &vec![1, 2]);
        let n = token_count(&text);
        let expected = n + if n >= 2 { n - 1 } else { 0 };
        let fv = hash_ngram_features(&text, &cfg);
        prop_assert_eq!(fv.total() as usize, expected, "text {:?} has {} tokens", text, n);
    }

    /// Turn histograms conserve mass: bins sum to the record count and
    /// fractions sum to one whenever the input is non-empty.
    #[test]
    fn turn_histogram_conserves_mass(
        turn_counts in prop::collection::vec(1usize..15, 0..30),
    ) {
        let records: Vec<InstructionRecord> = turn_counts
            .iter()
            .enumerate()
            .map(|(i, &t)| tiny_record(format!("r{i}"), vec![], t))
            .collect();
        let hist = turn_stats(records.iter());
        prop_assert_eq!(hist.bins.iter().sum::<u64>(), records.len() as u64);
        prop_assert_eq!(hist.total, records.len() as u64);
        if !records.is_empty() {
            let sum: f64 = hist.fractions.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    /// The long-tail partition is a partition for any label layout: every
    /// index lands in exactly one of retained / remainder.
    #[test]
    fn long_tail_split_partitions_input(
        seed: u64,
        label_picks in prop::collection::vec(prop::collection::vec(0usize..5, 0..3), 1..80),
    ) {
        let records: Vec<InstructionRecord> = label_picks
            .iter()
            .enumerate()
            .map(|(i, picks)| {
                let mut labels: Vec<String> =
                    picks.iter().map(|&p| format!("lab-{p}")).collect();
                labels.dedup();
                tiny_record(format!("r{i:03}"), labels, 1)
            })
            .collect();
        let freqs = compute_label_frequencies(records.iter());
        let cfg = SeedFilterConfig {
            band_all: [2, 10],
            band_third: [10, 40],
            ..Default::default()
        };
        let split = partition_long_tail(&records, &freqs, &cfg, seed);
        let retained: HashSet<usize> = split.retained.iter().map(|&(i, _)| i).collect();
        let remainder: HashSet<usize> = split.remainder.iter().copied().collect();
        prop_assert_eq!(retained.len() + remainder.len(), records.len());
        prop_assert!(retained.is_disjoint(&remainder));
        let mut union: Vec<usize> = retained.union(&remainder).copied().collect();
        union.sort_unstable();
        prop_assert_eq!(union, (0..records.len()).collect::<Vec<_>>());
    }

    /// Config hashing is stable across clones and sensitive to the seed, so
    /// run directories collide exactly when configs are identical.
    #[test]
    fn config_hash_tracks_content(seed_a: u64, seed_b: u64) {
        let a = RunConfig { seed: seed_a, ..Default::default() };
        let b = RunConfig { seed: seed_b, ..Default::default() };
        prop_assert_eq!(a.canonical_hash(), a.clone().canonical_hash());
        prop_assert_eq!(a.canonical_hash().len(), 64);
        if seed_a != seed_b {
            prop_assert_ne!(a.canonical_hash(), b.canonical_hash());
        }
    }

    /// Label frequency counting sums per-record label multiplicity.
    #[test]
    fn label_frequencies_sum_to_label_occurrences(
        label_picks in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 0..50),
    ) {
        let records: Vec<InstructionRecord> = label_picks
            .iter()
            .enumerate()
            .map(|(i, picks)| {
                let mut labels: Vec<String> =
                    picks.iter().map(|&p| format!("lab-{p}")).collect();
                labels.sort();
                labels.dedup();
                tiny_record(format!("r{i:03}"), labels, 1)
            })
            .collect();
        let freqs: BTreeMap<String, u64> = compute_label_frequencies(records.iter());
        let total: u64 = freqs.values().sum();
        let expected: u64 =
            records.iter().map(|r| r.second_level_labels().len() as u64).sum();
        prop_assert_eq!(total, expected);
    }
}

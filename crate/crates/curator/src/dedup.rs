//! Embedding-based near-duplicate removal and benchmark decontamination.
//!
//! Records are embedded (unit norm), then offending pairs are found either
//! exhaustively or through hyperplane LSH blocking. The default blocking
//! setup (96 planes, 32 bands of 3 bits) misses a qualifying pair at the
//! default threshold with probability about 3e-8, so the blocked result
//! matches the exhaustive one in practice.
//!
//! Removal is pair-local: for every offending pair the later record (by
//! input position) is removed, whether or not the earlier one survives some
//! other pair. This keeps the removal set independent of visit order.

use crate::corpus::InstructionRecord;
use crate::gateway::{Gateway, GatewayError};
use crate::manifest::{reason, ManifestRow};
use crate::util::{hash_index, unit_f64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DedupError {
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("lsh planes {planes} must be a positive multiple of bands {bands} with at most 64 bits per band")]
    BadLshConfig { planes: usize, bands: usize },
    #[error("embedding count {embeddings} does not match record count {records}")]
    CountMismatch { embeddings: usize, records: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decides whether a similarity score means "too close".
///
/// With `threshold_is_similarity` false (default) the threshold is a cosine
/// distance: offending iff 1 - similarity < threshold. With it true the
/// threshold is a minimum similarity: offending iff similarity >= threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCriterion {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub threshold_is_similarity: bool,
}

fn default_threshold() -> f64 {
    0.3
}

impl Default for SimilarityCriterion {
    fn default() -> Self {
        SimilarityCriterion { threshold: default_threshold(), threshold_is_similarity: false }
    }
}

impl SimilarityCriterion {
    pub fn offending(&self, similarity: f64) -> bool {
        if self.threshold_is_similarity {
            similarity >= self.threshold
        } else {
            1.0 - similarity < self.threshold
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    #[serde(default, flatten)]
    pub criterion: SimilarityCriterion,
    #[serde(default = "default_planes")]
    pub lsh_planes: usize,
    #[serde(default = "default_bands")]
    pub lsh_bands: usize,
    /// Compare every pair instead of LSH blocking.
    #[serde(default)]
    pub exhaustive: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_planes() -> usize {
    96
}

fn default_bands() -> usize {
    32
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            criterion: SimilarityCriterion::default(),
            lsh_planes: default_planes(),
            lsh_bands: default_bands(),
            exhaustive: false,
            seed: 0,
        }
    }
}

/// Random-hyperplane signature index. Vectors agreeing on every plane of a
/// band share that band's bucket and become candidate pairs.
pub struct SimilarityIndex {
    planes: Vec<Vec<f64>>,
    bands: usize,
    bits: usize,
}

/// Standard normal deviate derived from a hash (Box-Muller).
fn hash_normal(h: u64) -> f64 {
    let u1 = unit_f64(hash_index(h, 0));
    let u2 = unit_f64(hash_index(h, 1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl SimilarityIndex {
    pub fn new(dim: usize, planes: usize, bands: usize, seed: u64) -> Result<Self, DedupError> {
        if planes == 0 || bands == 0 || !planes.is_multiple_of(bands) || planes / bands > 64 {
            return Err(DedupError::BadLshConfig { planes, bands });
        }
        let plane_vecs: Vec<Vec<f64>> = (0..planes)
            .map(|p| {
                (0..dim)
                    .map(|d| hash_normal(hash_index(hash_index(seed, p as u64), d as u64)))
                    .collect()
            })
            .collect();
        Ok(SimilarityIndex { planes: plane_vecs, bands, bits: planes / bands })
    }

    /// One bucket key per band; keys from different bands never collide.
    pub fn band_keys(&self, v: &[f32]) -> Vec<u64> {
        let signs: Vec<bool> = self
            .planes
            .iter()
            .map(|plane| {
                let dot: f64 =
                    plane.iter().zip(v.iter()).map(|(p, x)| p * (*x as f64)).sum();
                dot >= 0.0
            })
            .collect();
        (0..self.bands)
            .map(|b| {
                let mut pattern: u64 = 0;
                for i in 0..self.bits {
                    pattern = (pattern << 1) | (signs[b * self.bits + i] as u64);
                }
                ((b as u64) << self.bits) | pattern
            })
            .collect()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

/// All offending pairs (i < j) within one embedding set, sorted by (i, j).
pub fn similar_pairs(
    vecs: &[Vec<f32>],
    cfg: &DedupConfig,
) -> Result<Vec<(usize, usize, f64)>, DedupError> {
    let candidates: Vec<(usize, usize)> = if cfg.exhaustive || vecs.len() < 2 {
        (0..vecs.len()).flat_map(|i| ((i + 1)..vecs.len()).map(move |j| (i, j))).collect()
    } else {
        let index = SimilarityIndex::new(vecs[0].len(), cfg.lsh_planes, cfg.lsh_bands, cfg.seed)?;
        let keys: Vec<Vec<u64>> = vecs.par_iter().map(|v| index.band_keys(v)).collect();
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, ks) in keys.iter().enumerate() {
            for &k in ks {
                buckets.entry(k).or_default().push(i);
            }
        }
        let mut set = BTreeSet::new();
        for members in buckets.values() {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    set.insert((i.min(j), i.max(j)));
                }
            }
        }
        set.into_iter().collect()
    };
    let mut out: Vec<(usize, usize, f64)> = candidates
        .par_iter()
        .filter_map(|&(i, j)| {
            let sim = dot(&vecs[i], &vecs[j]);
            if cfg.criterion.offending(sim) {
                Some((i, j, sim))
            } else {
                None
            }
        })
        .collect();
    out.sort_by_key(|a| (a.0, a.1));
    Ok(out)
}

/// All offending cross pairs (query index, corpus index), sorted.
pub fn similar_pairs_cross(
    queries: &[Vec<f32>],
    corpus: &[Vec<f32>],
    cfg: &DedupConfig,
) -> Result<Vec<(usize, usize, f64)>, DedupError> {
    if queries.is_empty() || corpus.is_empty() {
        return Ok(Vec::new());
    }
    let candidates: Vec<(usize, usize)> = if cfg.exhaustive {
        (0..queries.len()).flat_map(|i| (0..corpus.len()).map(move |j| (i, j))).collect()
    } else {
        let index =
            SimilarityIndex::new(queries[0].len(), cfg.lsh_planes, cfg.lsh_bands, cfg.seed)?;
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        for (j, v) in corpus.iter().enumerate() {
            for k in index.band_keys(v) {
                buckets.entry(k).or_default().push(j);
            }
        }
        let keys: Vec<Vec<u64>> = queries.par_iter().map(|v| index.band_keys(v)).collect();
        let mut set = BTreeSet::new();
        for (i, ks) in keys.iter().enumerate() {
            for k in ks {
                if let Some(members) = buckets.get(k) {
                    for &j in members {
                        set.insert((i, j));
                    }
                }
            }
        }
        set.into_iter().collect()
    };
    let mut out: Vec<(usize, usize, f64)> = candidates
        .par_iter()
        .filter_map(|&(i, j)| {
            let sim = dot(&queries[i], &corpus[j]);
            if cfg.criterion.offending(sim) {
                Some((i, j, sim))
            } else {
                None
            }
        })
        .collect();
    out.sort_by_key(|a| (a.0, a.1));
    Ok(out)
}

/// Embeds record prompts through the gateway (unit-norm vectors).
pub fn embed_records(
    gateway: &Gateway,
    records: &[InstructionRecord],
) -> Result<Vec<Vec<f32>>, DedupError> {
    let texts: Vec<String> = records.iter().map(|r| r.prompt_text()).collect();
    Ok(gateway.embed_texts(&texts)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub kept_id: String,
    pub removed_id: String,
    pub similarity: f64,
}

pub struct DedupOutcome {
    pub kept: Vec<InstructionRecord>,
    pub pairs: Vec<DuplicatePair>,
    pub rows: Vec<ManifestRow>,
}

/// Removes the later record of every offending pair.
pub fn dedup_dataset(
    records: Vec<InstructionRecord>,
    embeddings: &[Vec<f32>],
    cfg: &DedupConfig,
    stage: &str,
) -> Result<DedupOutcome, DedupError> {
    if embeddings.len() != records.len() {
        return Err(DedupError::CountMismatch {
            embeddings: embeddings.len(),
            records: records.len(),
        });
    }
    let offending = similar_pairs(embeddings, cfg)?;
    let mut removed: HashMap<usize, f64> = HashMap::new();
    let mut pairs = Vec::with_capacity(offending.len());
    for (i, j, sim) in offending {
        pairs.push(DuplicatePair {
            kept_id: records[i].id.clone(),
            removed_id: records[j].id.clone(),
            similarity: sim,
        });
        let entry = removed.entry(j).or_insert(sim);
        if sim > *entry {
            *entry = sim;
        }
    }
    let mut kept = Vec::with_capacity(records.len() - removed.len());
    let mut rows = Vec::with_capacity(records.len());
    for (idx, r) in records.into_iter().enumerate() {
        match removed.get(&idx) {
            Some(&sim) => rows.push(
                ManifestRow::dropped(stage, r.id.clone(), reason::NEAR_DUPLICATE).with_score(sim),
            ),
            None => {
                rows.push(ManifestRow::kept(stage, r.id.clone(), reason::KEPT));
                kept.push(r);
            }
        }
    }
    Ok(DedupOutcome { kept, pairs, rows })
}

#[derive(Debug, Clone)]
pub struct BenchmarkSuite {
    pub name: String,
    pub items: Vec<String>,
}

/// Loads `<dir>/<name>.txt` files, one benchmark item per line. Empty or
/// whitespace-only files are skipped with a warning.
pub fn load_benchmark_suites(dir: &Path) -> Result<Vec<BenchmarkSuite>, DedupError> {
    let mut suites = Vec::new();
    if !dir.exists() {
        return Ok(suites);
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    for path in paths {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let items: Vec<String> = fs::read_to_string(&path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if items.is_empty() {
            log::warn!("benchmark file {} is empty, skipping", path.display());
            continue;
        }
        suites.push(BenchmarkSuite { name, items });
    }
    Ok(suites)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContaminationHit {
    pub record_id: String,
    pub benchmark: String,
    pub item_index: usize,
    pub similarity: f64,
}

pub struct DecontamOutcome {
    pub kept: Vec<InstructionRecord>,
    pub hits: Vec<ContaminationHit>,
    pub rows: Vec<ManifestRow>,
}

/// Drops every record too close to any benchmark item.
pub fn decontaminate(
    records: Vec<InstructionRecord>,
    embeddings: &[Vec<f32>],
    suites: &[BenchmarkSuite],
    gateway: &Gateway,
    cfg: &DedupConfig,
    stage: &str,
) -> Result<DecontamOutcome, DedupError> {
    if embeddings.len() != records.len() {
        return Err(DedupError::CountMismatch {
            embeddings: embeddings.len(),
            records: records.len(),
        });
    }
    let mut contaminated: HashSet<usize> = HashSet::new();
    let mut hits = Vec::new();
    for suite in suites {
        let bench_vecs = gateway.embed_texts(&suite.items)?;
        for (i, j, sim) in similar_pairs_cross(embeddings, &bench_vecs, cfg)? {
            contaminated.insert(i);
            hits.push(ContaminationHit {
                record_id: records[i].id.clone(),
                benchmark: suite.name.clone(),
                item_index: j,
                similarity: sim,
            });
        }
    }
    let mut kept = Vec::with_capacity(records.len() - contaminated.len());
    let mut rows = Vec::with_capacity(records.len());
    for (idx, r) in records.into_iter().enumerate() {
        if contaminated.contains(&idx) {
            rows.push(ManifestRow::dropped(stage, r.id.clone(), reason::CONTAMINATED));
        } else {
            rows.push(ManifestRow::kept(stage, r.id.clone(), reason::KEPT));
            kept.push(r);
        }
    }
    Ok(DecontamOutcome { kept, hits, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Role, Turn};

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        v.into_iter().map(|x| (x as f64 / n) as f32).collect()
    }

    /// Unit vector at a chosen cosine to the first axis, in the (e0, e_axis) plane.
    fn at_cosine(dim: usize, axis: usize, cos: f64) -> Vec<f32> {
        let mut v = vec![0.0f32; dim];
        v[0] = cos as f32;
        v[axis] = (1.0 - cos * cos).sqrt() as f32;
        v
    }

    fn rec(id: &str, prompt: &str) -> InstructionRecord {
        InstructionRecord::new(
            id,
            "unit",
            Domain::Chat,
            vec![Turn::new(Role::Human, prompt), Turn::new(Role::Assistant, "ok")],
        )
    }

    #[test]
    fn test_criterion_distance_and_similarity_modes() {
        let dist = SimilarityCriterion::default();
        assert!(dist.offending(0.71));
        assert!(!dist.offending(0.70)); // distance 0.3 is not < 0.3
        assert!(!dist.offending(0.0));
        let sim = SimilarityCriterion { threshold: 0.8, threshold_is_similarity: true };
        assert!(sim.offending(0.8));
        assert!(sim.offending(0.95));
        assert!(!sim.offending(0.79));
    }

    #[test]
    fn test_bad_lsh_config_rejected() {
        assert!(SimilarityIndex::new(8, 96, 32, 0).is_ok());
        assert!(SimilarityIndex::new(8, 95, 32, 0).is_err());
        assert!(SimilarityIndex::new(8, 0, 32, 0).is_err());
        assert!(SimilarityIndex::new(8, 96, 0, 0).is_err());
        // 130 bits per band does not fit the u64 pattern
        assert!(SimilarityIndex::new(8, 260, 2, 0).is_err());
    }

    #[test]
    fn test_band_keys_deterministic_and_band_local() {
        let idx = SimilarityIndex::new(16, 96, 32, 7).unwrap();
        let v = unit(vec![1.0; 16]);
        let k1 = idx.band_keys(&v);
        let k2 = idx.band_keys(&v);
        assert_eq!(k1, k2);
        assert_eq!(k1.len(), 32);
        // Band prefixes make cross-band collisions impossible.
        let prefixes: BTreeSet<u64> = k1.iter().map(|k| k >> 3).collect();
        assert_eq!(prefixes.len(), 32);
    }

    #[test]
    fn test_identical_vectors_always_candidates() {
        let v = unit(vec![0.3, -1.2, 0.8, 2.0]);
        let pairs = similar_pairs(&[v.clone(), v], &DedupConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0, 0);
        assert_eq!(pairs[0].1, 1);
        assert!((pairs[0].2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn test_orthogonal_vectors_not_offending() {
        let dim = 64;
        let vecs: Vec<Vec<f32>> = (0..8).map(|i| at_cosine(dim, i + 1, 0.0)).collect();
        let pairs = similar_pairs(&vecs, &DedupConfig::default()).unwrap();
        // mutual similarity 0, except shared e0 component is absent here (cos 0)
        assert!(pairs.is_empty());
    }

    #[test]
    fn test_blocked_matches_exhaustive() {
        // 40 vectors: 10 planted near-duplicate pairs plus 20 well-separated.
        let dim = 32;
        let mut vecs = Vec::new();
        for i in 0..10 {
            let base = at_cosine(dim, 1 + i, 0.6);
            vecs.push(base.clone());
            // rotate slightly within the plane: cosine ~0.995
            let mut close = base.clone();
            close[0] += 0.1;
            vecs.push(unit(close));
        }
        for i in 0..20 {
            vecs.push(at_cosine(dim, 11 + i, 0.05));
        }
        let blocked = similar_pairs(&vecs, &DedupConfig::default()).unwrap();
        let exhaustive =
            similar_pairs(&vecs, &DedupConfig { exhaustive: true, ..Default::default() }).unwrap();
        assert_eq!(blocked.len(), exhaustive.len());
        for (b, e) in blocked.iter().zip(exhaustive.iter()) {
            assert_eq!((b.0, b.1), (e.0, e.1));
            assert!((b.2 - e.2).abs() < 1e-12);
        }
        assert!(!blocked.is_empty());
    }

    #[test]
    fn test_dedup_removes_later_of_each_pair() {
        let v1 = unit(vec![1.0, 0.0, 0.0, 0.0]);
        let v2 = unit(vec![0.99, 0.1, 0.0, 0.0]);
        let v3 = unit(vec![0.0, 0.0, 1.0, 0.0]);
        let records = vec![rec("first", "p1"), rec("second", "p2"), rec("third", "p3")];
        let out =
            dedup_dataset(records, &[v1, v2, v3], &DedupConfig::default(), "dedup").unwrap();
        let kept: Vec<&str> = out.kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(kept, vec!["first", "third"]);
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].kept_id, "first");
        assert_eq!(out.pairs[0].removed_id, "second");
        assert_eq!(out.rows.len(), 3);
        let dropped: Vec<_> =
            out.rows.iter().filter(|r| r.reason == reason::NEAR_DUPLICATE).collect();
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].id, "second");
    }

    #[test]
    fn test_dedup_pair_rule_not_chained() {
        // a~b and b~c but a!~c: b and c both removed (later element of an
        // offending pair), regardless of b's own removal.
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.8, 0.6]); // cos(a,b)=0.8, offending
        let c = unit(vec![0.45, 0.89]); // cos(b,c)~0.894, cos(a,c)~0.45
        let cfg = DedupConfig {
            criterion: SimilarityCriterion { threshold: 0.25, ..Default::default() },
            exhaustive: true,
            ..Default::default()
        };
        let records = vec![rec("a", "x"), rec("b", "y"), rec("c", "z")];
        let out = dedup_dataset(records, &[a, b, c], &cfg, "dedup").unwrap();
        let kept: Vec<&str> = out.kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(kept, vec!["a"]);
    }

    #[test]
    fn test_decontaminate_drops_benchmark_neighbors() {
        let gw = Gateway::mock(3);
        let contaminated_prompt = "What is the capital city of France, answer briefly";
        let clean_prompt = "Implement a binary search tree rotation in Rust";
        let records = vec![rec("dirty", contaminated_prompt), rec("clean", clean_prompt)];
        let embeddings = embed_records(&gw, &records).unwrap();
        let suites = vec![BenchmarkSuite {
            name: "quiz".into(),
            items: vec![contaminated_prompt.to_string()],
        }];
        let cfg = DedupConfig::default();
        let out = decontaminate(records, &embeddings, &suites, &gw, &cfg, "decontam").unwrap();
        let kept: Vec<&str> = out.kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(kept, vec!["clean"]);
        assert_eq!(out.hits.len(), 1);
        assert_eq!(out.hits[0].record_id, "dirty");
        assert_eq!(out.hits[0].benchmark, "quiz");
        assert!(out.hits[0].similarity > 0.99);
    }

    #[test]
    fn test_load_benchmark_suites_skips_empty() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("alpha.txt"), "question one\nquestion two\n").unwrap();
        fs::write(tmp.path().join("empty.txt"), "\n  \n").unwrap();
        fs::write(tmp.path().join("notes.md"), "ignored").unwrap();
        let suites = load_benchmark_suites(tmp.path()).unwrap();
        assert_eq!(suites.len(), 1);
        assert_eq!(suites[0].name, "alpha");
        assert_eq!(suites[0].items.len(), 2);
    }

    #[test]
    fn test_missing_benchmark_dir_is_empty() {
        let suites = load_benchmark_suites(Path::new("/nonexistent/bench")).unwrap();
        assert!(suites.is_empty());
    }

    #[test]
    fn test_count_mismatch_rejected() {
        let records = vec![rec("a", "x")];
        let err = dedup_dataset(records, &[], &DedupConfig::default(), "dedup");
        assert!(matches!(err, Err(DedupError::CountMismatch { .. })));
    }

    #[test]
    fn test_cross_pairs_empty_inputs() {
        let cfg = DedupConfig::default();
        assert!(similar_pairs_cross(&[], &[unit(vec![1.0])], &cfg).unwrap().is_empty());
        assert!(similar_pairs_cross(&[unit(vec![1.0])], &[], &cfg).unwrap().is_empty());
    }
}

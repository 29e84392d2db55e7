//! Run configuration: one TOML file drives the whole pipeline.
//!
//! Every field has a default, so an empty file is a valid configuration;
//! defaults reproduce the reference corpus proportions in `reference_scale`.
//! The canonical hash of a configuration names the run directory and guards
//! resumption against config drift.

use crate::corpus::Domain;
use crate::dedup::DedupConfig;
use crate::domain_select::DomainPlan;
use crate::evolve::EvolutionConfig;
use crate::featurizer::FeaturizerConfig;
use crate::gateway::GatewayConfig;
use crate::label_system::LabelSystemConfig;
use crate::seed_filter::SeedFilterConfig;
use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Reference corpus sizes in millions of records. The default quotas and
/// ratios in this module are derived from them.
pub mod reference_scale {
    /// (pool, selected) per domain.
    pub const CODE_M: (f64, f64) = (7.1, 1.5);
    pub const MATH_M: (f64, f64) = (11.8, 1.4);
    pub const KNOWLEDGE_M: (f64, f64) = (88.5, 3.3);
    /// Cleaned dialog pool and the portion used in the foundational set.
    pub const CHAT_M: (f64, f64) = (9.0, 2.8);
    /// Raw dialog pool before cleaning.
    pub const RAW_DIALOG_POOL_M: f64 = 116.4;
    /// Dialog seeds selected for evolution.
    pub const SEED_M: f64 = 1.2;
    /// Foundational records selected by domain rules alone.
    pub const FOUNDATIONAL_SELECTED_M: f64 = 6.2;
    /// Foundational total after the dialog seed replay.
    pub const FOUNDATIONAL_TOTAL_M: f64 = 7.4;
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Input pool, one record per line; the `domain` field routes records.
    #[serde(default = "default_pool")]
    pub pool: PathBuf,
    /// Parent directory for run outputs.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Directory of `<benchmark>.txt` files used for decontamination.
    #[serde(default)]
    pub benchmarks_dir: Option<PathBuf>,
    /// Ability gap report controlling weak-domain supplementation.
    #[serde(default)]
    pub gap_report: Option<PathBuf>,
    /// Precomputed scores keyed by record id (JSONL).
    #[serde(default)]
    pub sidecar_scores: Option<PathBuf>,
    /// Label alias overrides, "alias -> canonical" per line.
    #[serde(default)]
    pub label_overrides: Option<PathBuf>,
}

fn default_pool() -> PathBuf {
    PathBuf::from("pool.jsonl")
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            pool: default_pool(),
            output_dir: default_output(),
            benchmarks_dir: None,
            gap_report: None,
            sidecar_scores: None,
            label_overrides: None,
        }
    }
}

/// Importance-resampling knobs shared by every dsir-strategy domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsirParams {
    /// Smoothing added to each hashed bucket.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Cap on records used to fit the raw distribution.
    #[serde(default = "default_raw_cap")]
    pub raw_sample_cap: usize,
    /// Gumbel noise scale; 0 turns resampling into top-k by weight.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_raw_cap() -> usize {
    1_000_000
}

fn default_noise() -> f64 {
    1.0
}

impl Default for DsirParams {
    fn default() -> Self {
        DsirParams {
            alpha: default_alpha(),
            raw_sample_cap: default_raw_cap(),
            noise_scale: default_noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct SamplerConfig {
    /// Nested subset sizes to emit after packaging; empty disables the stage.
    #[serde(default)]
    pub ladder_sizes: Vec<usize>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Rayon worker threads; 0 uses the rayon default.
    #[serde(default)]
    pub workers: usize,
    /// Emit one merged training manifest instead of the two-phase split.
    #[serde(default)]
    pub one_stage: bool,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub featurizer: FeaturizerConfig,
    #[serde(default)]
    pub dsir: DsirParams,
    #[serde(default = "default_domains")]
    pub domains: BTreeMap<Domain, DomainPlan>,
    #[serde(default)]
    pub labels: LabelSystemConfig,
    #[serde(default)]
    pub seed_filter: SeedFilterConfig,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub dedup: DedupConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
}

/// Per-domain defaults sized to the reference corpus proportions. Code and
/// math are importance-resampled toward target prompts (paths must be set
/// before those domains run); knowledge drops weak sources and caps
/// augmented duplicates; chat keeps its full cleaned pool for seed
/// filtering.
fn default_domains() -> BTreeMap<Domain, DomainPlan> {
    use reference_scale::*;
    let mut map = BTreeMap::new();
    let mut code = DomainPlan::source_rules();
    code.strategy = crate::domain_select::SelectionStrategy::Dsir;
    code.quota_ratio = CODE_M.1 / CODE_M.0;
    map.insert(Domain::Code, code);
    let mut math = DomainPlan::source_rules();
    math.strategy = crate::domain_select::SelectionStrategy::Dsir;
    math.quota_ratio = MATH_M.1 / MATH_M.0;
    map.insert(Domain::Math, math);
    let mut knowledge = DomainPlan::source_rules();
    knowledge.quota_ratio = KNOWLEDGE_M.1 / KNOWLEDGE_M.0;
    knowledge.denylist = vec!["sst2".into(), "sst-2".into(), "imdb".into()];
    map.insert(Domain::Knowledge, knowledge);
    let mut chat = DomainPlan::source_rules();
    chat.quota_ratio = 1.0;
    map.insert(Domain::Chat, chat);
    map
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            one_stage: false,
            paths: PathsConfig::default(),
            featurizer: FeaturizerConfig::default(),
            dsir: DsirParams::default(),
            domains: default_domains(),
            labels: LabelSystemConfig::default(),
            seed_filter: SeedFilterConfig::default(),
            evolution: EvolutionConfig::default(),
            dedup: DedupConfig::default(),
            sampler: SamplerConfig::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sf = &self.seed_filter;
        if !(sf.loss_keep_quantile > 0.0 && sf.loss_keep_quantile <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "loss_keep_quantile {} must be in (0, 1]",
                sf.loss_keep_quantile
            )));
        }
        if !(0.0..1.0).contains(&sf.convergence_drop_quantile) {
            return Err(ConfigError::Invalid(format!(
                "convergence_drop_quantile {} must be in [0, 1)",
                sf.convergence_drop_quantile
            )));
        }
        if sf.band_all[0] > sf.band_all[1] || sf.band_third[0] > sf.band_third[1] {
            return Err(ConfigError::Invalid("frequency bands must be ordered".into()));
        }
        if sf.band_third_divisor == 0 {
            return Err(ConfigError::Invalid("band_third_divisor must be positive".into()));
        }
        if self.dedup.criterion.threshold <= 0.0 || self.dedup.criterion.threshold >= 1.0 {
            return Err(ConfigError::Invalid(format!(
                "dedup threshold {} must be in (0, 1)",
                self.dedup.criterion.threshold
            )));
        }
        if self.dedup.lsh_bands == 0
            || self.dedup.lsh_planes == 0
            || !self.dedup.lsh_planes.is_multiple_of(self.dedup.lsh_bands)
            || self.dedup.lsh_planes / self.dedup.lsh_bands > 64
        {
            return Err(ConfigError::Invalid(format!(
                "lsh planes {} must be a positive multiple of bands {} with at most 64 bits per band",
                self.dedup.lsh_planes, self.dedup.lsh_bands
            )));
        }
        for (domain, plan) in &self.domains {
            if !(0.0..=1.0).contains(&plan.quota_ratio) {
                return Err(ConfigError::Invalid(format!(
                    "{} quota_ratio {} must be in [0, 1]",
                    domain.as_str(),
                    plan.quota_ratio
                )));
            }
        }
        if self.featurizer.ngram_orders.is_empty() || self.featurizer.buckets == 0 {
            return Err(ConfigError::Invalid(
                "featurizer needs at least one n-gram order and a positive bucket count".into(),
            ));
        }
        if self.dsir.alpha <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "dsir alpha {} must be positive",
                self.dsir.alpha
            )));
        }
        self.evolution
            .templates
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Stable content hash: same configuration, same hash, regardless of how
    /// the TOML was formatted.
    pub fn canonical_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        sha256_hex(json.as_bytes())
    }
}

/// Parses "alias -> canonical" override lines; '#' starts a comment.
pub fn load_label_overrides(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((from, to)) = line.split_once("->") else {
            return Err(ConfigError::Invalid(format!(
                "override line {}: expected 'alias -> canonical', got {raw:?}",
                no + 1
            )));
        };
        map.insert(from.trim().to_string(), to.trim().to_string());
    }
    Ok(map)
}

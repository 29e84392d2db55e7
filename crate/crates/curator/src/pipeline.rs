//! Stage orchestration over a content-addressed run directory.
//!
//! Each stage reads its inputs from the run directory and writes its outputs
//! back atomically, so the pipeline can stop after any stage and resume
//! later; a resumed run produces byte-identical output to an uninterrupted
//! one. The run directory is named by the configuration hash, and state.json
//! refuses to resume under a changed configuration.

use crate::config::{load_label_overrides, ConfigError, RunConfig};
use crate::corpus::{
    read_dataset, stream_dataset, turn_stats, write_dataset, write_atomic, Domain,
    InstructionRecord, RejectEntry, RejectLog, TurnHistogram, TURN_BIN_LABELS,
};
use crate::dedup::{
    decontaminate, dedup_dataset, embed_records, load_benchmark_suites, DedupError,
};
use crate::domain_select::{
    assemble_foundational, select_domain, supplement_weak_domain, DomainSelection, GapReport,
    SelectError,
};
use crate::evolve::{run_evolution, EvolveError};
use crate::gateway::{ensure_scores, Gateway, GatewayError, ScoreNeeds, SidecarScores};
use crate::label_system::{compute_label_frequencies, label_records, LabelError};
use crate::manifest::{reason, Decision, ManifestRow, ManifestWriter, StageSummary};
use crate::sampler::{emit_size_ladder, SampleError};
use crate::seed_filter::select_seed_set;
use crate::util::{hash_str, sha256_hex};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Select,
    Label,
    Seed,
    Assemble,
    Evolve,
    Dedup,
    Package,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Select,
        Stage::Label,
        Stage::Seed,
        Stage::Assemble,
        Stage::Evolve,
        Stage::Dedup,
        Stage::Package,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Select => "select",
            Stage::Label => "label",
            Stage::Seed => "seed",
            Stage::Assemble => "assemble",
            Stage::Evolve => "evolve",
            Stage::Dedup => "dedup",
            Stage::Package => "package",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .iter()
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown stage '{s}', expected one of: ingest select label seed assemble evolve dedup package"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("selection: {0}")]
    Select(#[from] SelectError),
    #[error("labeling: {0}")]
    Label(#[from] LabelError),
    #[error("evolution: {0}")]
    Evolve(#[from] EvolveError),
    #[error("dedup: {0}")]
    Dedup(#[from] DedupError),
    #[error("sampling: {0}")]
    Sample(#[from] SampleError),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// True when the failure is a spent model-call budget; such a run can be
    /// resumed with a larger budget and loses no completed work.
    pub fn budget_exhausted(&self) -> bool {
        matches!(
            self,
            PipelineError::Gateway(GatewayError::BudgetExhausted)
                | PipelineError::Evolve(EvolveError::Gateway(GatewayError::BudgetExhausted))
                | PipelineError::Label(LabelError::Gateway(GatewayError::BudgetExhausted))
                | PipelineError::Dedup(DedupError::Gateway(GatewayError::BudgetExhausted))
        )
    }

    /// 2 = configuration error, 3 = stage failure, 4 = budget exhausted.
    pub fn exit_code(&self) -> i32 {
        if self.budget_exhausted() {
            return 4;
        }
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Gateway(GatewayError::Config(_)) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Resume this run directory, skipping stages its state.json marks
    /// complete. The directory must have been produced by the same config.
    pub resume: Option<PathBuf>,
    /// Stop (successfully) after this stage completes.
    pub stop_after: Option<Stage>,
}

pub struct RunPaths {
    pub root: PathBuf,
    pub datasets: PathBuf,
    pub manifests: PathBuf,
    pub reports: PathBuf,
    pub checkpoints: PathBuf,
}

impl RunPaths {
    pub fn new(root: PathBuf) -> Self {
        RunPaths {
            datasets: root.join("datasets"),
            manifests: root.join("manifests"),
            reports: root.join("reports"),
            checkpoints: root.join("checkpoints"),
            root,
        }
    }

    fn create(&self) -> std::io::Result<()> {
        for d in [&self.root, &self.datasets, &self.manifests, &self.reports, &self.checkpoints] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.datasets.join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports.join(name)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunState {
    config_hash: String,
    seed: u64,
    completed: Vec<String>,
}

impl RunState {
    fn is_done(&self, stage: Stage) -> bool {
        self.completed.iter().any(|s| s == stage.as_str())
    }

    fn mark(&mut self, stage: Stage) {
        if !self.is_done(stage) {
            self.completed.push(stage.as_str().to_string());
        }
    }
}

pub struct RunOutcome {
    pub root: PathBuf,
    pub completed: Vec<String>,
    pub summaries: BTreeMap<String, StageSummary>,
}

struct Pipeline {
    cfg: RunConfig,
    paths: RunPaths,
    gateway: Gateway,
    manifests: ManifestWriter,
    state: RunState,
}

/// Default run directory for a configuration: a content-addressed name, so
/// the same config always lands in the same place.
pub fn run_root(cfg: &RunConfig) -> PathBuf {
    let hash = cfg.canonical_hash();
    cfg.paths.output_dir.join(format!("run-{}", &hash[..12]))
}

/// Runs the pipeline (or the remainder of one) for this configuration.
pub fn run(cfg: RunConfig, opts: PipelineOptions) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let hash = cfg.canonical_hash();
    let root = match &opts.resume {
        Some(dir) => dir.clone(),
        None => run_root(&cfg),
    };
    let resuming = opts.resume.is_some();
    let paths = RunPaths::new(root);
    paths.create()?;

    let state_path = paths.root.join("state.json");
    let mut state = RunState { config_hash: hash.clone(), seed: cfg.seed, completed: Vec::new() };
    if resuming && state_path.exists() {
        let prior: RunState = serde_json::from_slice(&fs::read(&state_path)?)
            .map_err(|e| PipelineError::Data(format!("corrupt state.json: {e}")))?;
        if prior.config_hash != hash {
            return Err(PipelineError::Config(ConfigError::Invalid(format!(
                "refusing to resume: run directory was built with config {} but current config hashes to {}",
                prior.config_hash, hash
            ))));
        }
        state = prior;
    }

    let gateway = Gateway::from_config(&cfg.gateway)?;
    let mut manifests = ManifestWriter::new(paths.manifests.clone());
    // Summaries survive resumption so the final report covers skipped stages.
    let summaries_path = paths.report("stage_summaries.json");
    if resuming && summaries_path.exists() {
        if let Ok(prior) = serde_json::from_slice::<BTreeMap<String, StageSummary>>(
            &fs::read(&summaries_path)?,
        ) {
            manifests.summaries = prior;
        }
    }

    let mut p = Pipeline { cfg, paths, gateway, manifests, state };
    for stage in Stage::ALL {
        if !(resuming && p.state.is_done(stage)) {
            if let Err(e) = p.run_stage(stage) {
                p.write_failure(stage, &e);
                return Err(e);
            }
            p.state.mark(stage);
            write_json(&state_path, &p.state)?;
            write_json(&summaries_path, &p.manifests.summaries)?;
        }
        if opts.stop_after == Some(stage) {
            break;
        }
    }
    Ok(RunOutcome {
        root: p.paths.root,
        completed: p.state.completed,
        summaries: p.manifests.summaries,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| PipelineError::Data(format!("serialize {}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(&bytes, path)?;
    Ok(())
}

/// Reads a dataset this pipeline wrote earlier; any bad line means the run
/// directory was tampered with or truncated.
pub(crate) fn read_clean(path: &Path) -> Result<Vec<InstructionRecord>, PipelineError> {
    let (records, rejects) = read_dataset(path)?;
    if let Some(r) = rejects.first() {
        return Err(PipelineError::Data(format!(
            "{} line {} is invalid ({}); run directory is corrupt, delete it and rerun",
            r.file, r.line_no, r.reason
        )));
    }
    Ok(records)
}

impl Pipeline {
    fn stage_seed(&self, stage: Stage) -> u64 {
        hash_str(self.cfg.seed, stage.as_str())
    }

    fn run_stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        log::info!("stage {stage}");
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Select => self.select(),
            Stage::Label => self.label(),
            Stage::Seed => self.seed(),
            Stage::Assemble => self.assemble(),
            Stage::Evolve => self.evolve(),
            Stage::Dedup => self.dedup(),
            Stage::Package => self.package(),
        }
    }

    fn write_failure(&self, stage: Stage, err: &PipelineError) {
        let report = serde_json::json!({
            "stage": stage.as_str(),
            "error": err.to_string(),
            "exit_code": err.exit_code(),
            "resumable": err.budget_exhausted(),
        });
        let _ = write_json(&self.paths.report("failure.json"), &report);
    }

    /// Validates the input pool. Schema rejects and duplicate ids go to the
    /// reject log; everything valid lands in datasets/pool_valid.jsonl.
    fn ingest(&mut self) -> Result<(), PipelineError> {
        let pool = &self.cfg.paths.pool;
        let mut rejects = RejectLog::create(&self.paths.report("rejects.jsonl"))?;
        let mut seen: HashSet<String> = HashSet::new();
        let mut valid: Vec<InstructionRecord> = Vec::new();
        let mut rows: Vec<ManifestRow> = Vec::new();
        for item in stream_dataset(pool)? {
            match item {
                Ok(r) => {
                    if seen.insert(r.id.clone()) {
                        rows.push(ManifestRow::kept("ingest", r.id.clone(), reason::KEPT));
                        valid.push(r);
                    } else {
                        rejects.push(&RejectEntry {
                            file: pool.to_string_lossy().into_owned(),
                            line_no: 0,
                            reason: format!("duplicate id {}", r.id),
                        })?;
                    }
                }
                Err(e) => {
                    rejects.push(&e.to_reject())?;
                }
            }
        }
        let rejected = rejects.finish()?;
        log::info!("ingest: {} valid, {} rejected", valid.len(), rejected);
        write_dataset(valid.iter(), &self.paths.dataset("pool_valid.jsonl"))?;
        self.manifests.write_stage("ingest", &rows)?;
        Ok(())
    }

    /// Splits the pool by domain and applies each domain's selection plan,
    /// then supplements domains the gap report marks weak.
    fn select(&mut self) -> Result<(), PipelineError> {
        let records = read_clean(&self.paths.dataset("pool_valid.jsonl"))?;
        let mut by_domain: BTreeMap<Domain, Vec<InstructionRecord>> = BTreeMap::new();
        for r in records {
            by_domain.entry(r.domain).or_default().push(r);
        }
        let gaps = match &self.cfg.paths.gap_report {
            Some(p) => GapReport::load(p)?.gap_domains(),
            None => Vec::new(),
        };
        let seed = self.stage_seed(Stage::Select);

        for domain in Domain::ALL {
            let pool = by_domain.remove(&domain).unwrap_or_default();
            let stage_name = format!("select_{}", domain.as_str());
            let Some(plan) = self.cfg.domains.get(&domain) else {
                log::warn!("no plan for domain {}, dropping {} records", domain.as_str(), pool.len());
                let rows: Vec<ManifestRow> = pool
                    .iter()
                    .map(|r| ManifestRow::dropped(&stage_name, r.id.clone(), reason::NO_DOMAIN_PLAN))
                    .collect();
                self.manifests.write_stage(&stage_name, &rows)?;
                write_dataset([], &self.paths.dataset(&format!("selected_{}.jsonl", domain.as_str())))?;
                continue;
            };
            let pool_ids: Vec<String> = pool.iter().map(|r| r.id.clone()).collect();
            let mut selection = select_domain(
                domain,
                plan,
                pool,
                &self.cfg.featurizer,
                self.cfg.dsir.alpha,
                self.cfg.dsir.raw_sample_cap,
                seed,
                self.cfg.dsir.noise_scale,
            )?;
            self.manifests.write_stage(&stage_name, &selection.rows)?;

            if gaps.contains(&domain) {
                let selected_ids: HashSet<&str> =
                    selection.selected.iter().map(|r| r.id.as_str()).collect();
                // Re-read the pool remainder: selection consumed the records.
                let full = read_clean(&self.paths.dataset("pool_valid.jsonl"))?;
                let remainder: Vec<InstructionRecord> = full
                    .into_iter()
                    .filter(|r| r.domain == domain && !selected_ids.contains(r.id.as_str()))
                    .collect();
                drop(pool_ids);
                let extra = supplement_weak_domain(
                    domain,
                    plan,
                    remainder,
                    selection.selected.len(),
                    &self.cfg.featurizer,
                    self.cfg.dsir.alpha,
                    self.cfg.dsir.raw_sample_cap,
                    seed,
                    self.cfg.dsir.noise_scale,
                )?;
                self.manifests
                    .write_stage(&format!("supplement_{}", domain.as_str()), &extra.rows)?;
                selection.selected.extend(extra.selected);
            }
            write_dataset(
                selection.selected.iter(),
                &self.paths.dataset(&format!("selected_{}.jsonl", domain.as_str())),
            )?;
        }
        Ok(())
    }

    /// Labels the chat selection: second-level tags, clustered canonical
    /// labels, first-level categories.
    fn label(&mut self) -> Result<(), PipelineError> {
        let mut records = read_clean(&self.paths.dataset("selected_chat.jsonl"))?;
        let overrides = match &self.cfg.paths.label_overrides {
            Some(p) => load_label_overrides(p)?,
            None => BTreeMap::new(),
        };
        let (taxonomy, stats) = label_records(
            &mut records,
            &self.gateway,
            &self.cfg.labels,
            self.stage_seed(Stage::Label),
            &overrides,
        )?;
        let rows: Vec<ManifestRow> = records
            .iter()
            .map(|r| {
                if r.labels.is_some() {
                    ManifestRow::kept("label", r.id.clone(), reason::KEPT)
                } else {
                    ManifestRow::kept("label", r.id.clone(), reason::UNTAGGABLE)
                }
            })
            .collect();
        write_dataset(records.iter(), &self.paths.dataset("labeled.jsonl"))?;
        taxonomy.save(&self.paths.report("taxonomy.json"))?;
        write_json(&self.paths.report("label_stats.json"), &stats)?;
        self.manifests.write_stage("label", &rows)?;
        Ok(())
    }

    /// Scores the labeled dialogs and selects the high-quality seed set.
    fn seed(&mut self) -> Result<(), PipelineError> {
        let mut records = read_clean(&self.paths.dataset("labeled.jsonl"))?;
        let sidecar = match &self.cfg.paths.sidecar_scores {
            Some(p) => Some(SidecarScores::load(p)?),
            None => None,
        };
        ensure_scores(&mut records, &self.gateway, sidecar.as_ref(), ScoreNeeds::losses())?;
        let freq = compute_label_frequencies(records.iter());
        write_json(&self.paths.report("label_frequencies.json"), &freq)?;
        let selection =
            select_seed_set(records, &freq, &self.cfg.seed_filter, self.stage_seed(Stage::Seed));
        log::info!(
            "seed: {} selected ({} band-retained, {} truncated)",
            selection.seeds.len(),
            selection.retained_band,
            selection.truncated
        );
        write_dataset(selection.seeds.iter(), &self.paths.dataset("seeds.jsonl"))?;
        self.manifests.write_stage("seed", &selection.rows)?;
        Ok(())
    }

    /// Merges the non-chat domain selections with a replay of the seed set
    /// into the foundational dataset.
    fn assemble(&mut self) -> Result<(), PipelineError> {
        let mut selections = Vec::new();
        for domain in [Domain::Code, Domain::Math, Domain::Knowledge] {
            let path = self.paths.dataset(&format!("selected_{}.jsonl", domain.as_str()));
            let selected = if path.exists() { read_clean(&path)? } else { Vec::new() };
            selections.push(DomainSelection { domain, selected, rows: Vec::new() });
        }
        let seeds = read_clean(&self.paths.dataset("seeds.jsonl"))?;
        let (foundational, rows) =
            assemble_foundational(selections, seeds, self.stage_seed(Stage::Assemble))?;
        write_dataset(foundational.iter(), &self.paths.dataset("foundational.jsonl"))?;
        self.manifests.write_stage("assemble", &rows)?;
        Ok(())
    }

    /// Evolves the seed set; the output pool is seeds plus accepted children.
    fn evolve(&mut self) -> Result<(), PipelineError> {
        let seeds = read_clean(&self.paths.dataset("seeds.jsonl"))?;
        let checkpoint = self.paths.checkpoints.join("evolution.jsonl");
        let out = run_evolution(
            &self.gateway,
            seeds,
            &self.cfg.evolution,
            self.stage_seed(Stage::Evolve),
            Some(&checkpoint),
        )?;
        write_json(&self.paths.report("evolution_rounds.json"), &out.round_logs)?;
        if !out.completed {
            return Err(PipelineError::Gateway(GatewayError::BudgetExhausted));
        }
        let rows: Vec<ManifestRow> = out
            .records
            .iter()
            .map(|r| {
                if r.meta.contains_key("evolved_from") {
                    ManifestRow::kept("evolve", r.id.clone(), reason::EVOLVED_ACCEPTED)
                } else {
                    ManifestRow::kept("evolve", r.id.clone(), reason::KEPT)
                }
            })
            .collect();
        write_dataset(out.records.iter(), &self.paths.dataset("evolved.jsonl"))?;
        self.manifests.write_stage("evolve", &rows)?;
        Ok(())
    }

    /// Near-duplicate removal and benchmark decontamination over both
    /// datasets.
    fn dedup(&mut self) -> Result<(), PipelineError> {
        let suites = match &self.cfg.paths.benchmarks_dir {
            Some(dir) => load_benchmark_suites(dir)?,
            None => Vec::new(),
        };
        let mut dcfg = self.cfg.dedup.clone();
        dcfg.seed = self.stage_seed(Stage::Dedup);

        for (input, tag) in
            [("foundational.jsonl", "foundational"), ("evolved.jsonl", "conversational")]
        {
            let records = read_clean(&self.paths.dataset(input))?;
            let embeddings = embed_records(&self.gateway, &records)?;
            let dd = dedup_dataset(records, &embeddings, &dcfg, &format!("dedup_{tag}"))?;
            let kept_embeddings: Vec<Vec<f32>> = dd
                .rows
                .iter()
                .enumerate()
                .filter(|(_, row)| row.decision == Decision::Kept)
                .map(|(i, _)| embeddings[i].clone())
                .collect();
            self.manifests.write_stage(&format!("dedup_{tag}"), &dd.rows)?;
            write_json(&self.paths.report(&format!("duplicate_pairs_{tag}.json")), &dd.pairs)?;

            let dc = decontaminate(
                dd.kept,
                &kept_embeddings,
                &suites,
                &self.gateway,
                &dcfg,
                &format!("decontam_{tag}"),
            )?;
            self.manifests.write_stage(&format!("decontam_{tag}"), &dc.rows)?;
            write_json(&self.paths.report(&format!("contamination_{tag}.json")), &dc.hits)?;
            write_dataset(dc.kept.iter(), &self.paths.dataset(&format!("{tag}_final.jsonl")))?;
        }
        Ok(())
    }

    /// Emits the training plan, corpus statistics, and (optionally) the
    /// nested subset ladder.
    fn package(&mut self) -> Result<(), PipelineError> {
        let foundational = read_clean(&self.paths.dataset("foundational_final.jsonl"))?;
        let mut conversational = read_clean(&self.paths.dataset("conversational_final.jsonl"))?;

        let plan = if self.cfg.one_stage {
            // Seeds appear in both datasets by design; a merged corpus keeps
            // one copy of each id.
            let mut seen: HashSet<String> = HashSet::new();
            let mut merged: Vec<InstructionRecord> = Vec::new();
            for r in foundational.iter().chain(conversational.iter()) {
                if seen.insert(r.id.clone()) {
                    merged.push(r.clone());
                }
            }
            let mut order: Vec<usize> = (0..merged.len()).collect();
            let shuffle_seed = self.stage_seed(Stage::Package);
            order.sort_by_key(|&i| hash_str(shuffle_seed, &merged[i].id));
            let merged: Vec<InstructionRecord> =
                order.into_iter().map(|i| merged[i].clone()).collect();
            let path = self.paths.dataset("merged.jsonl");
            write_dataset(merged.iter(), &path)?;
            vec![phase_descriptor("single", &path, merged.len())?]
        } else {
            vec![
                phase_descriptor(
                    "foundational",
                    &self.paths.dataset("foundational_final.jsonl"),
                    foundational.len(),
                )?,
                phase_descriptor(
                    "conversational",
                    &self.paths.dataset("conversational_final.jsonl"),
                    conversational.len(),
                )?,
            ]
        };
        write_json(&self.paths.report("training_plan.json"), &plan)?;

        let stats = CorpusStats {
            foundational: dataset_stats(&foundational),
            conversational: dataset_stats(&conversational),
        };
        write_json(&self.paths.report("stats.json"), &stats)?;
        write_stats_csv(&self.paths.report("stats.csv"), &stats)?;

        if !self.cfg.sampler.ladder_sizes.is_empty() {
            let sidecar = match &self.cfg.paths.sidecar_scores {
                Some(p) => Some(SidecarScores::load(p)?),
                None => None,
            };
            let needs = ScoreNeeds { answer_loss: false, post_tune_loss: false, reward: true };
            ensure_scores(&mut conversational, &self.gateway, sidecar.as_ref(), needs)?;
            let report = emit_size_ladder(
                &conversational,
                &self.cfg.sampler.ladder_sizes,
                self.stage_seed(Stage::Package),
                &self.paths.dataset("ladder"),
            )?;
            write_json(&self.paths.report("ladder.json"), &report)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct PhaseDescriptor {
    phase: String,
    /// Path relative to the run directory, so the plan stays byte-identical
    /// no matter where the run directory lives.
    dataset: String,
    records: usize,
    sha256: String,
}

fn phase_descriptor(
    phase: &str,
    path: &Path,
    records: usize,
) -> Result<PhaseDescriptor, PipelineError> {
    let bytes = fs::read(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(PhaseDescriptor {
        phase: phase.to_string(),
        dataset: format!("datasets/{name}"),
        records,
        sha256: sha256_hex(&bytes),
    })
}

#[derive(Serialize)]
struct DatasetStats {
    records: usize,
    turn_histogram: TurnHistogram,
    label_frequencies: BTreeMap<String, u64>,
    first_level_frequencies: BTreeMap<String, u64>,
}

#[derive(Serialize)]
struct CorpusStats {
    foundational: DatasetStats,
    conversational: DatasetStats,
}

fn dataset_stats(records: &[InstructionRecord]) -> DatasetStats {
    let mut first: BTreeMap<String, u64> = BTreeMap::new();
    for r in records {
        for l in r.first_level_labels() {
            *first.entry(l.clone()).or_insert(0) += 1;
        }
    }
    DatasetStats {
        records: records.len(),
        turn_histogram: turn_stats(records.iter()),
        label_frequencies: compute_label_frequencies(records.iter()),
        first_level_frequencies: first,
    }
}

fn write_stats_csv(path: &Path, stats: &CorpusStats) -> Result<(), PipelineError> {
    let mut out = String::from("dataset,records,turn_bin,count,fraction\n");
    for (name, ds) in
        [("foundational", &stats.foundational), ("conversational", &stats.conversational)]
    {
        for (i, label) in TURN_BIN_LABELS.iter().enumerate() {
            out.push_str(&format!(
                "{name},{},{label},{},{:.6}\n",
                ds.records, ds.turn_histogram.bins[i], ds.turn_histogram.fractions[i]
            ));
        }
    }
    write_atomic(out.as_bytes(), path)?;
    Ok(())
}

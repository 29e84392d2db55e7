//! Command-line interface: one subcommand per pipeline stage plus
//! inspection utilities, all driven by a single TOML config.
//!
//! Stage subcommands run the pipeline through that stage (earlier stages
//! run first, or are skipped when `--resume DIR` points at a run that
//! already completed them). Inspection subcommands (`diagnose`, `decontam`,
//! `stats`, `sample-ladder`) read run artifacts and never advance pipeline
//! state.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 stage failure, 4 model-call
//! budget exhausted.

use crate::config::{ConfigError, RunConfig};
use crate::corpus::turn_stats;
use crate::dedup::{decontaminate, embed_records, load_benchmark_suites};
use crate::evolve::diagnose_weak_abilities;
use crate::gateway::{ensure_scores, Gateway, GatewayMode, ScoreNeeds, SidecarScores};
use crate::label_system::compute_label_frequencies;
use crate::pipeline::{self, PipelineError, PipelineOptions, RunPaths, Stage};
use crate::sampler::emit_size_ladder;
use crate::util::hash_str;
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "curator",
    version,
    about = "Deterministic two-phase instruction dataset curation"
)]
pub struct Cli {
    /// TOML config file; omitted fields take built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Bound worker threads (0 = automatic).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    /// Resume this run directory, skipping completed stages.
    #[arg(long, global = true, value_name = "DIR")]
    pub resume: Option<PathBuf>,

    /// Force the deterministic mock model backend.
    #[arg(long, global = true)]
    pub mock: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the input pool; reject malformed or duplicate records.
    Ingest,
    /// Apply each domain's selection plan to the validated pool.
    Select,
    /// Tag, cluster, and categorize the chat selection.
    Label,
    /// Score the labeled dialogs and filter them into the seed set.
    Seed,
    /// Evolve the seed set into harder variants (runs prior stages first).
    Evolve,
    /// Report which first-level abilities candidate models are weak on.
    Diagnose,
    /// Remove near-duplicates and benchmark contamination from both
    /// datasets (runs prior stages first).
    Dedup,
    /// Check datasets against the benchmark suites without modifying them.
    Decontam {
        /// Dataset files to check; defaults to the run's final datasets.
        #[arg(long, value_name = "PATH")]
        input: Vec<PathBuf>,
    },
    /// Emit nested reward-ranked subsets of the conversational dataset.
    SampleLadder {
        /// Subset sizes; defaults to the config's ladder sizes.
        #[arg(long, value_name = "N")]
        sizes: Vec<usize>,
        /// Dataset to sample; defaults to the run's conversational dataset.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Print dataset statistics (record counts, turn histogram, label
    /// frequencies) as JSON.
    Stats {
        /// Dataset files; defaults to the run's final datasets.
        #[arg(long, value_name = "PATH")]
        input: Vec<PathBuf>,
    },
    /// Run the full pipeline.
    Run {
        /// Stop after this stage: ingest, select, label, seed, assemble,
        /// evolve, dedup, or package.
        #[arg(long, value_name = "STAGE")]
        stop_after: Option<String>,
    },
}

/// Parses arguments from the process environment and runs them; returns the
/// process exit code.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("info"),
    )
    .format_timestamp(None)
    .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cli.mock {
        cfg.gateway.mode = GatewayMode::Mock;
    }
    cfg.validate()?;
    if cfg.workers > 0 {
        // Ignore the error if a pool already exists (e.g. repeated calls in
        // one test process); outputs do not depend on worker count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    let opts =
        PipelineOptions { resume: cli.resume.clone(), stop_after: None };
    match &cli.command {
        Command::Ingest => run_through(cfg, opts, Stage::Ingest),
        Command::Select => run_through(cfg, opts, Stage::Select),
        Command::Label => run_through(cfg, opts, Stage::Label),
        Command::Seed => run_through(cfg, opts, Stage::Seed),
        Command::Evolve => run_through(cfg, opts, Stage::Evolve),
        Command::Dedup => run_through(cfg, opts, Stage::Dedup),
        Command::Run { stop_after } => {
            let stop = match stop_after {
                Some(name) => Some(name.parse::<Stage>().map_err(ConfigError::Invalid)?),
                None => None,
            };
            run_through_opt(cfg, PipelineOptions { stop_after: stop, ..opts })
        }
        Command::Diagnose => diagnose(cfg, opts),
        Command::Decontam { input } => decontam_check(cfg, &cli.resume, input),
        Command::SampleLadder { sizes, input } => {
            sample_ladder(cfg, &cli.resume, sizes, input.as_deref())
        }
        Command::Stats { input } => stats(cfg, &cli.resume, input),
    }
}

fn run_through(
    cfg: RunConfig,
    opts: PipelineOptions,
    stage: Stage,
) -> Result<(), PipelineError> {
    run_through_opt(cfg, PipelineOptions { stop_after: Some(stage), ..opts })
}

fn run_through_opt(cfg: RunConfig, opts: PipelineOptions) -> Result<(), PipelineError> {
    let out = pipeline::run(cfg, opts)?;
    println!("run directory: {}", out.root.display());
    println!("completed stages: {}", out.completed.join(" "));
    Ok(())
}

/// Resolves the run directory the utility subcommands should inspect.
fn inspect_root(cfg: &RunConfig, resume: &Option<PathBuf>) -> RunPaths {
    let root = match resume {
        Some(d) => d.clone(),
        None => pipeline::run_root(cfg),
    };
    RunPaths::new(root)
}

fn require_dataset(path: &Path) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(PipelineError::Data(format!(
            "{} does not exist; run the pipeline stages that produce it first, or pass --input",
            path.display()
        )))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Data(format!("serialize report: {e}")))?;
    println!("{text}");
    Ok(())
}

/// Runs the diagnosis the evolution stage would perform in its first round
/// and prints the report, without touching pipeline state.
fn diagnose(cfg: RunConfig, opts: PipelineOptions) -> Result<(), PipelineError> {
    let out = pipeline::run(
        cfg.clone(),
        PipelineOptions { stop_after: Some(Stage::Seed), ..opts },
    )?;
    let paths = RunPaths::new(out.root);
    let seeds = pipeline::read_clean(&paths.dataset("seeds.jsonl"))?;
    let gateway = Gateway::from_config(&cfg.gateway)?;
    let seed = hash_str(hash_str(cfg.seed, Stage::Evolve.as_str()), "diagnose-1");
    let report = diagnose_weak_abilities(&gateway, &seeds, &cfg.evolution, seed)
        .map_err(PipelineError::Gateway)?;
    print_json(&report)
}

fn default_finals(paths: &RunPaths) -> Result<Vec<PathBuf>, PipelineError> {
    Ok(vec![
        require_dataset(&paths.dataset("foundational_final.jsonl"))?,
        require_dataset(&paths.dataset("conversational_final.jsonl"))?,
    ])
}

fn decontam_check(
    cfg: RunConfig,
    resume: &Option<PathBuf>,
    input: &[PathBuf],
) -> Result<(), PipelineError> {
    let paths = inspect_root(&cfg, resume);
    let inputs =
        if input.is_empty() { default_finals(&paths)? } else { input.to_vec() };
    let suites = match &cfg.paths.benchmarks_dir {
        Some(dir) => load_benchmark_suites(dir)?,
        None => Vec::new(),
    };
    let gateway = Gateway::from_config(&cfg.gateway)?;
    let mut dcfg = cfg.dedup.clone();
    dcfg.seed = hash_str(cfg.seed, Stage::Dedup.as_str());

    let mut reports = Vec::new();
    for path in &inputs {
        let records = pipeline::read_clean(path)?;
        let checked = records.len();
        let embeddings = embed_records(&gateway, &records)?;
        let outcome =
            decontaminate(records, &embeddings, &suites, &gateway, &dcfg, "decontam_check")?;
        reports.push(serde_json::json!({
            "file": path,
            "checked": checked,
            "contaminated": outcome.hits.len(),
            "hits": outcome.hits,
        }));
    }
    print_json(&reports)
}

fn sample_ladder(
    cfg: RunConfig,
    resume: &Option<PathBuf>,
    sizes: &[usize],
    input: Option<&Path>,
) -> Result<(), PipelineError> {
    let paths = inspect_root(&cfg, resume);
    let path = match input {
        Some(p) => p.to_path_buf(),
        None => require_dataset(&paths.dataset("conversational_final.jsonl"))?,
    };
    let sizes =
        if sizes.is_empty() { cfg.sampler.ladder_sizes.clone() } else { sizes.to_vec() };
    if sizes.is_empty() {
        return Err(PipelineError::Config(ConfigError::Invalid(
            "no ladder sizes: pass --sizes or set [sampler] ladder_sizes".into(),
        )));
    }
    let mut records = pipeline::read_clean(&path)?;
    let gateway = Gateway::from_config(&cfg.gateway)?;
    let sidecar = match &cfg.paths.sidecar_scores {
        Some(p) => Some(SidecarScores::load(p)?),
        None => None,
    };
    let needs = ScoreNeeds { answer_loss: false, post_tune_loss: false, reward: true };
    ensure_scores(&mut records, &gateway, sidecar.as_ref(), needs)?;
    let report = emit_size_ladder(
        &records,
        &sizes,
        hash_str(cfg.seed, Stage::Package.as_str()),
        &paths.dataset("ladder"),
    )?;
    print_json(&report)
}

fn stats(
    cfg: RunConfig,
    resume: &Option<PathBuf>,
    input: &[PathBuf],
) -> Result<(), PipelineError> {
    let paths = inspect_root(&cfg, resume);
    let inputs =
        if input.is_empty() { default_finals(&paths)? } else { input.to_vec() };
    let mut reports = Vec::new();
    for path in &inputs {
        let records = pipeline::read_clean(path)?;
        let mut first_level: BTreeMap<String, u64> = BTreeMap::new();
        for r in &records {
            for l in r.first_level_labels() {
                *first_level.entry(l.clone()).or_insert(0) += 1;
            }
        }
        reports.push(serde_json::json!({
            "file": path,
            "records": records.len(),
            "turn_histogram": turn_stats(records.iter()),
            "label_frequencies": compute_label_frequencies(records.iter()),
            "first_level_frequencies": first_level,
        }));
    }
    print_json(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_cli_parses_stage_subcommands() {
        for name in ["ingest", "select", "label", "seed", "evolve", "dedup", "run"] {
            let cli = Cli::try_parse_from(["curator", name]).unwrap();
            assert!(!cli.mock);
            let _ = cli.command;
        }
    }

    #[test]
    fn test_global_flags_apply_after_subcommand() {
        let cli = Cli::try_parse_from([
            "curator", "run", "--mock", "--seed", "7", "--workers", "2", "--stop-after", "label",
        ])
        .unwrap();
        assert!(cli.mock);
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.workers, Some(2));
        match cli.command {
            Command::Run { stop_after } => assert_eq!(stop_after.as_deref(), Some("label")),
            _ => panic!("expected run subcommand"),
        }
    }

    #[test]
    fn test_bad_stop_after_is_config_error() {
        let err = "bogus".parse::<Stage>().map_err(ConfigError::Invalid).unwrap_err();
        let wrapped = PipelineError::Config(err);
        assert_eq!(wrapped.exit_code(), 2);
    }
}

//! Multi-round instruction evolution.
//!
//! Each round: diagnose which first-level abilities the candidate models
//! answer poorly, rewrite instructions under those abilities with one of four
//! strategies (seeded round-robin), answer the rewrite, then have a judge
//! verify the rewrite actually changed meaning and stayed safe. Accepted
//! children join the pool and can evolve again next round.
//!
//! Every model interaction goes through the gateway, so a run is depleted
//! gracefully: when the call budget runs out mid-round the round ends early,
//! progress so far is on disk, and rerunning with the same arguments resumes
//! where it stopped.

use crate::corpus::{InstructionRecord, Role, Turn};
use crate::gateway::{ChatMessage, Gateway, GatewayError, GatewayRole};
use crate::util::hash_str;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Add explicit constraints or requirements to the instruction.
    AddConstraints,
    /// Increase the depth or breadth of what is asked.
    Deepen,
    /// Replace general concepts with concrete, specific ones.
    Concretize,
    /// Demand explicit multi-step reasoning.
    RequireReasoning,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::AddConstraints,
        Strategy::Deepen,
        Strategy::Concretize,
        Strategy::RequireReasoning,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::AddConstraints => "add_constraints",
            Strategy::Deepen => "deepen",
            Strategy::Concretize => "concretize",
            Strategy::RequireReasoning => "require_reasoning",
        }
    }

    /// One-letter code used in evolved record ids.
    pub fn code(&self) -> char {
        match self {
            Strategy::AddConstraints => 'c',
            Strategy::Deepen => 'd',
            Strategy::Concretize => 'k',
            Strategy::RequireReasoning => 'r',
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvolveError {
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("strategy {strategy:?}: {problem}")]
    Template { strategy: Strategy, problem: &'static str },
    #[error("record {id} has no instruction turn")]
    NoInstruction { id: String },
    #[error("progress log: {0}")]
    Progress(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rewrite templates, one per strategy. Each must contain `{instruction}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySet {
    pub templates: BTreeMap<Strategy, String>,
}

impl Default for StrategySet {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            Strategy::AddConstraints,
            "Rewrite the instruction below so it imposes additional explicit \
             constraints or requirements while keeping the original topic. \
             Return only the rewritten instruction between <<< and >>>.\n\n\
             <<<{instruction}>>>"
                .to_string(),
        );
        templates.insert(
            Strategy::Deepen,
            "Rewrite the instruction below so it probes the same topic at a \
             deeper level of difficulty or nuance. \
             Return only the rewritten instruction between <<< and >>>.\n\n\
             <<<{instruction}>>>"
                .to_string(),
        );
        templates.insert(
            Strategy::Concretize,
            "Rewrite the instruction below, replacing general or abstract \
             phrasing with a concrete scenario and specific details. \
             Return only the rewritten instruction between <<< and >>>.\n\n\
             <<<{instruction}>>>"
                .to_string(),
        );
        templates.insert(
            Strategy::RequireReasoning,
            "Rewrite the instruction below so a good answer must show its \
             reasoning step by step. \
             Return only the rewritten instruction between <<< and >>>.\n\n\
             <<<{instruction}>>>"
                .to_string(),
        );
        StrategySet { templates }
    }
}

impl StrategySet {
    pub fn validate(&self) -> Result<(), EvolveError> {
        for s in Strategy::ALL {
            match self.templates.get(&s) {
                None => return Err(EvolveError::Template { strategy: s, problem: "missing" }),
                Some(t) if !t.contains("{instruction}") => {
                    return Err(EvolveError::Template {
                        strategy: s,
                        problem: "missing {instruction} placeholder",
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    /// Records sampled per first-level ability during diagnosis.
    #[serde(default = "default_samples")]
    pub samples_per_ability: usize,
    /// An ability is weak when any referee score falls below this (1..10).
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    /// Models whose answers are judged during diagnosis; empty uses the
    /// responder role default.
    #[serde(default)]
    pub candidate_models: Vec<String>,
    /// Apply all four strategies to every candidate instead of round-robin.
    #[serde(default)]
    pub fan_out_all: bool,
    /// When false, skip diagnosis and treat every record as a candidate.
    #[serde(default = "default_true")]
    pub diagnose: bool,
    #[serde(default)]
    pub templates: StrategySet,
}

fn default_rounds() -> usize {
    2
}

fn default_samples() -> usize {
    4
}

fn default_threshold() -> f64 {
    5.0
}

fn default_true() -> bool {
    true
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            max_rounds: default_rounds(),
            samples_per_ability: default_samples(),
            score_threshold: default_threshold(),
            candidate_models: Vec::new(),
            fan_out_all: false,
            diagnose: true,
            templates: StrategySet::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    SemanticallyUnchanged,
    Harmful,
    Malformed,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Accepted => "accepted",
            Verdict::SemanticallyUnchanged => "semantically_unchanged",
            Verdict::Harmful => "harmful",
            Verdict::Malformed => "malformed",
        }
    }
}

const REWRITE_SYSTEM: &str = "[task:rewrite] You strengthen training instructions. Follow the \
                              strategy exactly and return only the rewritten instruction between \
                              <<< and >>>.";
const RESPOND_SYSTEM: &str = "[task:respond] Answer the instruction as well as you can.";
const JUDGE_SYSTEM: &str = "[task:judge] Compare the original and rewritten instructions. Reply \
                            with exactly one of: changed_and_safe, unchanged, harmful.";
const REFEREE_SYSTEM: &str = "[task:referee] Rate from 1 to 10 how well the answer fulfills the \
                              instruction. Reply as 'score: N'.";

/// Rewrites one record under a strategy and answers the rewrite. The child
/// record inherits labels, domain, and source; scores are dropped because
/// they describe the parent's text.
pub fn evolve_once(
    gateway: &Gateway,
    parent: &InstructionRecord,
    strategy: Strategy,
    round: usize,
    templates: &StrategySet,
) -> Result<InstructionRecord, EvolveError> {
    let instruction = parent
        .last_instruction()
        .ok_or_else(|| EvolveError::NoInstruction { id: parent.id.clone() })?;
    let template = templates
        .templates
        .get(&strategy)
        .ok_or(EvolveError::Template { strategy, problem: "missing" })?;
    let prompt = template.replace("{instruction}", instruction);
    let rewrite = gateway.complete_chat(
        &[ChatMessage::system(REWRITE_SYSTEM), ChatMessage::user(prompt)],
        GatewayRole::Rewriter,
    )?;
    let rewritten = extract_rewrite(&rewrite);

    let answer = gateway.complete_chat(
        &[
            ChatMessage::system(RESPOND_SYSTEM),
            ChatMessage::user(format!("<<<{rewritten}>>>")),
        ],
        GatewayRole::Responder,
    )?;

    let mut child = InstructionRecord::new(
        format!("{}-e{}{}", parent.id, round, strategy.code()),
        parent.source.clone(),
        parent.domain,
        vec![Turn::new(Role::Human, rewritten), Turn::new(Role::Assistant, answer)],
    );
    child.labels = parent.labels.clone();
    child.meta.insert("evolved_from".into(), parent.id.clone().into());
    child.meta.insert("evolution_round".into(), (round as u64).into());
    child.meta.insert("evolution_strategy".into(), strategy.name().into());
    Ok(child)
}

fn extract_rewrite(response: &str) -> String {
    let start = response.find("<<<").map(|p| p + 3);
    let body = match start {
        Some(s) => match response[s..].find(">>>") {
            Some(e) => &response[s..s + e],
            None => &response[s..],
        },
        None => response,
    };
    body.trim().to_string()
}

/// Judges whether a rewrite changed the instruction meaningfully and safely.
/// Identical strings short-circuit without a model call.
pub fn verify_rewrite(
    gateway: &Gateway,
    original: &str,
    rewritten: &str,
) -> Result<Verdict, GatewayError> {
    if original.trim() == rewritten.trim() {
        return Ok(Verdict::SemanticallyUnchanged);
    }
    let reply = gateway.complete_chat(
        &[
            ChatMessage::system(JUDGE_SYSTEM),
            ChatMessage::user(format!("Original:\n<<<{original}>>>\n\nRewritten:\n<<<{rewritten}>>>")),
        ],
        GatewayRole::Judge,
    )?;
    let lower = reply.to_lowercase();
    Ok(if lower.contains("harmful") {
        Verdict::Harmful
    } else if lower.contains("unchanged") {
        Verdict::SemanticallyUnchanged
    } else if lower.contains("changed_and_safe") || lower.contains("accept") {
        Verdict::Accepted
    } else {
        Verdict::Malformed
    })
}

/// Extracts a 1..10 referee score; anything unparsable or out of range is
/// None so the caller can skip the sample instead of misreading it.
pub fn parse_score(reply: &str) -> Option<f64> {
    let lower = reply.to_lowercase();
    let tail = match lower.find("score") {
        Some(p) => &lower[p..],
        None => lower.as_str(),
    };
    let digits: String =
        tail.chars().skip_while(|c| !c.is_ascii_digit()).take_while(|c| c.is_ascii_digit()).collect();
    let value: u32 = digits.parse().ok()?;
    if (1..=10).contains(&value) {
        Some(value as f64)
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AbilityDiagnosis {
    pub ability: String,
    pub sampled: usize,
    pub min_score: Option<f64>,
    /// Referee replies that could not be parsed; skipped, never counted weak.
    pub skipped: usize,
    pub weak: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosisReport {
    pub abilities: Vec<AbilityDiagnosis>,
    pub weak: BTreeSet<String>,
}

/// Samples each first-level ability, has every candidate model answer, and
/// marks the ability weak when any referee score falls below the threshold.
pub fn diagnose_weak_abilities(
    gateway: &Gateway,
    records: &[InstructionRecord],
    cfg: &EvolutionConfig,
    seed: u64,
) -> Result<DiagnosisReport, GatewayError> {
    let mut by_ability: BTreeMap<&str, Vec<&InstructionRecord>> = BTreeMap::new();
    for r in records {
        for a in r.first_level_labels() {
            by_ability.entry(a.as_str()).or_default().push(r);
        }
    }
    let models: Vec<Option<&str>> = if cfg.candidate_models.is_empty() {
        vec![None]
    } else {
        cfg.candidate_models.iter().map(|m| Some(m.as_str())).collect()
    };

    let mut abilities = Vec::new();
    let mut weak = BTreeSet::new();
    for (ability, members) in by_ability {
        let ability_seed = hash_str(seed, ability);
        let mut ranked: Vec<(u64, &InstructionRecord)> =
            members.iter().map(|r| (hash_str(ability_seed, &r.id), *r)).collect();
        ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let sample: Vec<&InstructionRecord> =
            ranked.into_iter().take(cfg.samples_per_ability).map(|(_, r)| r).collect();

        let mut min_score: Option<f64> = None;
        let mut skipped = 0usize;
        let mut is_weak = false;
        for r in &sample {
            let Some(instruction) = r.last_instruction() else {
                skipped += 1;
                continue;
            };
            for model in &models {
                let answer = gateway.complete_chat_as(
                    &[
                        ChatMessage::system(RESPOND_SYSTEM),
                        ChatMessage::user(format!("<<<{instruction}>>>")),
                    ],
                    GatewayRole::Responder,
                    *model,
                )?;
                let reply = gateway.complete_chat(
                    &[
                        ChatMessage::system(REFEREE_SYSTEM),
                        ChatMessage::user(format!(
                            "Instruction:\n<<<{instruction}>>>\n\nAnswer:\n<<<{answer}>>>"
                        )),
                    ],
                    GatewayRole::Referee,
                )?;
                match parse_score(&reply) {
                    Some(score) => {
                        min_score = Some(min_score.map_or(score, |m: f64| m.min(score)));
                        if score < cfg.score_threshold {
                            is_weak = true;
                        }
                    }
                    None => {
                        log::warn!("unparsable referee reply for {} in {ability}: {reply}", r.id);
                        skipped += 1;
                    }
                }
            }
        }
        if is_weak {
            weak.insert(ability.to_string());
        }
        abilities.push(AbilityDiagnosis {
            ability: ability.to_string(),
            sampled: sample.len(),
            min_score,
            skipped,
            weak: is_weak,
        });
    }
    Ok(DiagnosisReport { abilities, weak })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub weak_abilities: Vec<String>,
    pub candidates: usize,
    pub attempted: usize,
    pub accepted: usize,
    pub unchanged: usize,
    pub harmful: usize,
    pub malformed: usize,
    pub ended_early: bool,
}

pub struct EvolutionOutcome {
    /// Seeds plus all accepted children, in creation order.
    pub records: Vec<InstructionRecord>,
    pub round_logs: Vec<RoundLog>,
    /// False when the call budget ended a round early; rerunning with the
    /// same progress path resumes.
    pub completed: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ProgressEntry {
    Diagnosis {
        round: usize,
        weak: Vec<String>,
    },
    Evolve {
        round: usize,
        parent_id: String,
        strategy: Strategy,
        verdict: Verdict,
        #[serde(skip_serializing_if = "Option::is_none")]
        child: Option<Box<InstructionRecord>>,
    },
}

/// Replayed attempt outcomes keyed by (round, parent id, strategy).
type DoneByAttempt = HashMap<(usize, String, Strategy), (Verdict, Option<Box<InstructionRecord>>)>;

struct Progress {
    diagnosis: HashMap<usize, Vec<String>>,
    done: DoneByAttempt,
    writer: Option<BufWriter<File>>,
}

impl Progress {
    fn load(path: Option<&Path>) -> Result<Self, EvolveError> {
        let mut diagnosis = HashMap::new();
        let mut done = HashMap::new();
        if let Some(p) = path {
            if p.exists() {
                let reader = BufReader::new(File::open(p)?);
                for (no, line) in reader.lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: ProgressEntry = serde_json::from_str(&line).map_err(|e| {
                        EvolveError::Progress(format!("line {}: {e}", no + 1))
                    })?;
                    match entry {
                        ProgressEntry::Diagnosis { round, weak } => {
                            diagnosis.insert(round, weak);
                        }
                        ProgressEntry::Evolve { round, parent_id, strategy, verdict, child } => {
                            done.insert((round, parent_id, strategy), (verdict, child));
                        }
                    }
                }
            }
        }
        let writer = match path {
            Some(p) => {
                Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?))
            }
            None => None,
        };
        Ok(Progress { diagnosis, done, writer })
    }

    fn append(&mut self, entry: &ProgressEntry) -> Result<(), EvolveError> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, entry)
                .map_err(|e| EvolveError::Progress(e.to_string()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Runs up to `max_rounds` of evolution over the seed set. Pure function of
/// (seeds, config, run_seed) in mock mode, including across an interrupted
/// and resumed run.
pub fn run_evolution(
    gateway: &Gateway,
    seeds: Vec<InstructionRecord>,
    cfg: &EvolutionConfig,
    run_seed: u64,
    progress_path: Option<&Path>,
) -> Result<EvolutionOutcome, EvolveError> {
    cfg.templates.validate()?;
    if cfg.max_rounds == 0 {
        return Ok(EvolutionOutcome { records: seeds, round_logs: Vec::new(), completed: true });
    }
    let mut progress = Progress::load(progress_path)?;
    let mut pool = seeds;
    let mut round_logs = Vec::new();

    for round in 1..=cfg.max_rounds {
        let weak: Option<BTreeSet<String>> = if !cfg.diagnose {
            None
        } else if let Some(w) = progress.diagnosis.get(&round) {
            Some(w.iter().cloned().collect())
        } else {
            let report = match diagnose_weak_abilities(gateway, &pool, cfg, hash_str(run_seed, &format!("diagnose-{round}"))) {
                Ok(r) => r,
                Err(GatewayError::BudgetExhausted) => {
                    round_logs.push(RoundLog {
                        round,
                        weak_abilities: Vec::new(),
                        candidates: 0,
                        attempted: 0,
                        accepted: 0,
                        unchanged: 0,
                        harmful: 0,
                        malformed: 0,
                        ended_early: true,
                    });
                    return Ok(EvolutionOutcome { records: pool, round_logs, completed: false });
                }
                Err(e) => return Err(e.into()),
            };
            let weak_vec: Vec<String> = report.weak.iter().cloned().collect();
            progress.append(&ProgressEntry::Diagnosis { round, weak: weak_vec.clone() })?;
            Some(report.weak)
        };

        let candidates: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, r)| match &weak {
                None => true,
                Some(w) => r.first_level_labels().iter().any(|a| w.contains(a)),
            })
            .map(|(i, _)| i)
            .collect();
        let offset = (hash_str(run_seed, &format!("round-{round}")) % 4) as usize;

        let mut log = RoundLog {
            round,
            weak_abilities: weak.as_ref().map(|w| w.iter().cloned().collect()).unwrap_or_default(),
            candidates: candidates.len(),
            attempted: 0,
            accepted: 0,
            unchanged: 0,
            harmful: 0,
            malformed: 0,
            ended_early: false,
        };
        let mut new_children: Vec<InstructionRecord> = Vec::new();
        let mut ended_early = false;

        'candidates: for (pos, &idx) in candidates.iter().enumerate() {
            let strategies: Vec<Strategy> = if cfg.fan_out_all {
                Strategy::ALL.to_vec()
            } else {
                vec![Strategy::ALL[(offset + pos) % 4]]
            };
            for strategy in strategies {
                let key = (round, pool[idx].id.clone(), strategy);
                let (verdict, child) = if let Some((v, c)) = progress.done.get(&key) {
                    (*v, c.clone())
                } else {
                    let child = match evolve_once(gateway, &pool[idx], strategy, round, &cfg.templates) {
                        Ok(c) => c,
                        Err(EvolveError::Gateway(GatewayError::BudgetExhausted)) => {
                            ended_early = true;
                            break 'candidates;
                        }
                        Err(e) => return Err(e),
                    };
                    let original = pool[idx].last_instruction().unwrap_or_default();
                    let rewritten = child.last_instruction().unwrap_or_default();
                    let verdict = match verify_rewrite(gateway, original, rewritten) {
                        Ok(v) => v,
                        Err(GatewayError::BudgetExhausted) => {
                            ended_early = true;
                            break 'candidates;
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let kept_child =
                        if verdict == Verdict::Accepted { Some(Box::new(child)) } else { None };
                    progress.append(&ProgressEntry::Evolve {
                        round,
                        parent_id: key.1.clone(),
                        strategy,
                        verdict,
                        child: kept_child.clone(),
                    })?;
                    (verdict, kept_child)
                };
                log.attempted += 1;
                match verdict {
                    Verdict::Accepted => {
                        log.accepted += 1;
                        if let Some(c) = child {
                            new_children.push(*c);
                        }
                    }
                    Verdict::SemanticallyUnchanged => log.unchanged += 1,
                    Verdict::Harmful => log.harmful += 1,
                    Verdict::Malformed => log.malformed += 1,
                }
            }
        }

        pool.extend(new_children);
        log.ended_early = ended_early;
        round_logs.push(log);
        if ended_early {
            return Ok(EvolutionOutcome { records: pool, round_logs, completed: false });
        }
    }
    Ok(EvolutionOutcome { records: pool, round_logs, completed: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, LabelSet};
    use crate::gateway::Script;

    fn seed_record(id: &str, ability: &str) -> InstructionRecord {
        let mut r = InstructionRecord::new(
            id,
            "unit",
            Domain::Chat,
            vec![
                Turn::new(Role::Human, format!("Explain topic {id}")),
                Turn::new(Role::Assistant, "answer"),
            ],
        );
        r.labels = Some(LabelSet {
            second_level: vec![format!("{ability}-fine")],
            first_level: vec![ability.to_string()],
        });
        r
    }

    #[test]
    fn test_default_templates_validate() {
        StrategySet::default().validate().unwrap();
        for s in Strategy::ALL {
            assert!(StrategySet::default().templates[&s].contains("{instruction}"));
        }
    }

    #[test]
    fn test_missing_or_bad_template_rejected() {
        let mut set = StrategySet::default();
        set.templates.remove(&Strategy::Deepen);
        assert!(matches!(
            set.validate(),
            Err(EvolveError::Template { strategy: Strategy::Deepen, .. })
        ));
        let mut set = StrategySet::default();
        set.templates.insert(Strategy::Concretize, "no placeholder".into());
        assert!(set.validate().is_err());
    }

    #[test]
    fn test_evolve_once_builds_child() {
        let gw = Gateway::mock(7);
        let parent = seed_record("p1", "math");
        let child =
            evolve_once(&gw, &parent, Strategy::AddConstraints, 1, &StrategySet::default())
                .unwrap();
        assert_eq!(child.id, "p1-e1c");
        assert_eq!(child.domain, Domain::Chat);
        assert_eq!(child.labels, parent.labels);
        assert_eq!(child.conversations.len(), 2);
        assert_eq!(child.conversations[0].role, Role::Human);
        assert_eq!(child.conversations[1].role, Role::Assistant);
        assert_ne!(child.last_instruction(), parent.last_instruction());
        assert_eq!(child.meta["evolved_from"], "p1");
        assert_eq!(child.meta["evolution_strategy"], "add_constraints");
        assert!(child.scores.is_none());
    }

    #[test]
    fn test_verify_identical_short_circuits() {
        // Scripted gateway with an empty judge queue: a model call would fail.
        let gw = Gateway::scripted(Script::new());
        let v = verify_rewrite(&gw, "same text", "  same text  ").unwrap();
        assert_eq!(v, Verdict::SemanticallyUnchanged);
        assert_eq!(gw.calls_used(), 0);
    }

    #[test]
    fn test_verify_parses_all_verdicts() {
        let script = Script::new();
        script.push_chat(GatewayRole::Judge, "changed_and_safe");
        script.push_chat(GatewayRole::Judge, "unchanged");
        script.push_chat(GatewayRole::Judge, "harmful");
        script.push_chat(GatewayRole::Judge, "perhaps???");
        let gw = Gateway::scripted(script);
        assert_eq!(verify_rewrite(&gw, "a", "b").unwrap(), Verdict::Accepted);
        assert_eq!(verify_rewrite(&gw, "a", "b").unwrap(), Verdict::SemanticallyUnchanged);
        assert_eq!(verify_rewrite(&gw, "a", "b").unwrap(), Verdict::Harmful);
        assert_eq!(verify_rewrite(&gw, "a", "b").unwrap(), Verdict::Malformed);
    }

    #[test]
    fn test_parse_score_variants() {
        assert_eq!(parse_score("score: 7"), Some(7.0));
        assert_eq!(parse_score("Score: 10/10, excellent"), Some(10.0));
        assert_eq!(parse_score("I'd say score: 3 overall"), Some(3.0));
        assert_eq!(parse_score("8"), Some(8.0));
        assert_eq!(parse_score("no number here"), None);
        assert_eq!(parse_score("score: 0"), None);
        assert_eq!(parse_score("score: 42"), None);
    }

    #[test]
    fn test_diagnose_marks_low_scores_weak() {
        let records =
            vec![seed_record("a1", "alpha"), seed_record("a2", "alpha"), seed_record("b1", "beta")];
        let script = Script::new();
        for _ in 0..3 {
            script.push_chat(GatewayRole::Responder, "an answer");
        }
        // alpha consumes two referee replies (one per sample), beta one.
        script.push_chat(GatewayRole::Referee, "score: 9");
        script.push_chat(GatewayRole::Referee, "score: 2");
        script.push_chat(GatewayRole::Referee, "score: 8");
        let gw = Gateway::scripted(script);
        let cfg = EvolutionConfig {
            samples_per_ability: 2,
            candidate_models: vec!["m1".into()],
            ..Default::default()
        };
        let report = diagnose_weak_abilities(&gw, &records, &cfg, 11).unwrap();
        assert_eq!(report.weak.iter().collect::<Vec<_>>(), vec!["alpha"]);
        let alpha = report.abilities.iter().find(|a| a.ability == "alpha").unwrap();
        assert_eq!(alpha.sampled, 2);
        assert_eq!(alpha.min_score, Some(2.0));
        assert!(alpha.weak);
        let beta = report.abilities.iter().find(|a| a.ability == "beta").unwrap();
        assert!(!beta.weak);
    }

    #[test]
    fn test_diagnose_skips_unparsable_referee() {
        let records = vec![seed_record("a1", "alpha")];
        let script = Script::new();
        script.push_chat(GatewayRole::Responder, "an answer");
        script.push_chat(GatewayRole::Referee, "cannot rate this");
        let gw = Gateway::scripted(script);
        let cfg = EvolutionConfig { samples_per_ability: 1, ..Default::default() };
        let report = diagnose_weak_abilities(&gw, &records, &cfg, 0).unwrap();
        assert!(report.weak.is_empty());
        assert_eq!(report.abilities[0].skipped, 1);
        assert_eq!(report.abilities[0].min_score, None);
    }

    #[test]
    fn test_zero_rounds_pass_through() {
        let gw = Gateway::scripted(Script::new());
        let seeds = vec![seed_record("s1", "x"), seed_record("s2", "y")];
        let cfg = EvolutionConfig { max_rounds: 0, ..Default::default() };
        let out = run_evolution(&gw, seeds, &cfg, 0, None).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.round_logs.is_empty());
        assert!(out.completed);
        assert_eq!(gw.calls_used(), 0);
    }

    #[test]
    fn test_round_robin_covers_all_strategies() {
        let gw = Gateway::mock(3);
        let seeds: Vec<_> = (0..4).map(|i| seed_record(&format!("s{i}"), "a")).collect();
        let cfg = EvolutionConfig { max_rounds: 1, diagnose: false, ..Default::default() };
        let out = run_evolution(&gw, seeds, &cfg, 42, None).unwrap();
        assert!(out.completed);
        assert_eq!(out.round_logs.len(), 1);
        let log = &out.round_logs[0];
        assert_eq!(log.candidates, 4);
        assert_eq!(log.attempted, 4);
        assert_eq!(log.accepted + log.unchanged + log.harmful + log.malformed, 4);
        assert_eq!(out.records.len(), 4 + log.accepted);
        // One strategy per candidate, cycling: codes of accepted children are distinct.
        let codes: BTreeSet<char> = out.records[4..]
            .iter()
            .map(|r| r.id.chars().last().unwrap())
            .collect();
        assert_eq!(codes.len(), log.accepted);
    }

    #[test]
    fn test_fan_out_all_strategies_per_candidate() {
        let gw = Gateway::mock(5);
        let seeds = vec![seed_record("only", "a")];
        let cfg = EvolutionConfig {
            max_rounds: 1,
            diagnose: false,
            fan_out_all: true,
            ..Default::default()
        };
        let out = run_evolution(&gw, seeds, &cfg, 1, None).unwrap();
        assert_eq!(out.round_logs[0].attempted, 4);
    }

    #[test]
    fn test_evolution_deterministic_per_seed() {
        let cfg = EvolutionConfig { max_rounds: 2, diagnose: false, ..Default::default() };
        let seeds: Vec<_> = (0..3).map(|i| seed_record(&format!("s{i}"), "a")).collect();
        let a = run_evolution(&Gateway::mock(9), seeds.clone(), &cfg, 100, None).unwrap();
        let b = run_evolution(&Gateway::mock(9), seeds, &cfg, 100, None).unwrap();
        let ids_a: Vec<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
        let ids_b: Vec<&str> = b.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids_a, ids_b);
    }

    #[test]
    fn test_unlabeled_records_never_candidates_under_diagnosis() {
        let gw = Gateway::mock(1);
        let mut plain = InstructionRecord::new(
            "p",
            "unit",
            Domain::Chat,
            vec![Turn::new(Role::Human, "hi"), Turn::new(Role::Assistant, "yo")],
        );
        plain.labels = None;
        let out = run_evolution(
            &gw,
            vec![plain],
            &EvolutionConfig { max_rounds: 1, ..Default::default() },
            0,
            None,
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.round_logs[0].candidates, 0);
    }

    #[test]
    fn test_budget_exhaustion_resumes_to_same_output() {
        let tmp = tempfile::tempdir().unwrap();
        let progress = tmp.path().join("progress.jsonl");
        let seeds: Vec<_> = (0..4).map(|i| seed_record(&format!("s{i}"), "a")).collect();
        let cfg = EvolutionConfig { max_rounds: 1, diagnose: false, ..Default::default() };

        // Uninterrupted reference run.
        let full = run_evolution(&Gateway::mock(77), seeds.clone(), &cfg, 5, None).unwrap();
        assert!(full.completed);

        // 7 calls: two children complete (3 calls each), third is cut off.
        let gw = Gateway::mock(77).with_budget(7);
        let partial = run_evolution(&gw, seeds.clone(), &cfg, 5, Some(&progress)).unwrap();
        assert!(!partial.completed);
        assert!(partial.round_logs[0].ended_early);
        assert!(partial.round_logs[0].attempted < 4);

        let resumed = run_evolution(&Gateway::mock(77), seeds, &cfg, 5, Some(&progress)).unwrap();
        assert!(resumed.completed);
        let full_ids: Vec<&str> = full.records.iter().map(|r| r.id.as_str()).collect();
        let resumed_ids: Vec<&str> = resumed.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(full_ids, resumed_ids);
        let full_logs = serde_json::to_string(&full.round_logs).unwrap();
        let resumed_logs = serde_json::to_string(&resumed.round_logs).unwrap();
        assert_eq!(full_logs, resumed_logs);
    }

    #[test]
    fn test_diagnosis_reused_from_progress_log() {
        let tmp = tempfile::tempdir().unwrap();
        let progress = tmp.path().join("progress.jsonl");
        let seeds = vec![seed_record("s0", "alpha")];
        let cfg = EvolutionConfig {
            max_rounds: 1,
            samples_per_ability: 1,
            ..Default::default()
        };
        let gw = Gateway::mock(21);
        let first = run_evolution(&gw, seeds.clone(), &cfg, 9, Some(&progress)).unwrap();
        let calls_first = gw.calls_used();

        // Rerun: diagnosis and evolution both come from the log, zero calls.
        let gw2 = Gateway::mock(21);
        let second = run_evolution(&gw2, seeds, &cfg, 9, Some(&progress)).unwrap();
        assert_eq!(gw2.calls_used(), 0);
        assert!(calls_first > 0);
        let ids1: Vec<&str> = first.records.iter().map(|r| r.id.as_str()).collect();
        let ids2: Vec<&str> = second.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids1, ids2);
    }
}

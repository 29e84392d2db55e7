//! Record model and streaming JSONL ingestion.
//!
//! Datasets are UTF-8 JSONL, one record per line, LF line endings, no BOM.
//! Malformed lines never abort a stream: they are surfaced as per-line errors
//! so callers can route them to a reject log and keep going. Writes go
//! through a temp file and rename, so a crashed run never leaves a partial
//! dataset behind.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Code,
    Math,
    Knowledge,
    Chat,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Code, Domain::Math, Domain::Knowledge, Domain::Chat];

    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Code => "code",
            Domain::Math => "math",
            Domain::Knowledge => "knowledge",
            Domain::Chat => "chat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Turn { role, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelSet {
    pub second_level: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub first_level: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_tune_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_importance_weight: Option<f64>,
}

impl ScoreSet {
    pub fn is_empty(&self) -> bool {
        self.answer_loss.is_none()
            && self.post_tune_loss.is_none()
            && self.reward.is_none()
            && self.log_importance_weight.is_none()
    }
}

/// One multi-turn instruction record. Unknown top-level JSON keys are folded
/// into `meta` on parse, so foreign fields survive a round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub source: String,
    pub domain: Domain,
    pub conversations: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreSet>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
    #[serde(flatten, skip_serializing_if = "Map::is_empty")]
    unknown: Map<String, Value>,
}

impl InstructionRecord {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        domain: Domain,
        conversations: Vec<Turn>,
    ) -> Self {
        InstructionRecord {
            id: id.into(),
            source: source.into(),
            domain,
            conversations,
            labels: None,
            scores: None,
            meta: Map::new(),
            unknown: Map::new(),
        }
    }

    /// Number of human/assistant exchanges. A leading system turn does not
    /// count. Under the schema this equals the number of assistant turns.
    pub fn turn_count(&self) -> usize {
        self.conversations.iter().filter(|t| t.role == Role::Assistant).count()
    }

    /// Concatenated human-side text, used as the instruction for
    /// featurization and embedding.
    pub fn prompt_text(&self) -> String {
        let parts: Vec<&str> = self
            .conversations
            .iter()
            .filter(|t| t.role == Role::Human)
            .map(|t| t.content.as_str())
            .collect();
        parts.join("\n")
    }

    /// Full conversation text, all roles.
    pub fn full_text(&self) -> String {
        let parts: Vec<&str> = self.conversations.iter().map(|t| t.content.as_str()).collect();
        parts.join("\n")
    }

    /// Last human turn, the instruction an evolution rewrite targets.
    pub fn last_instruction(&self) -> Option<&str> {
        self.conversations
            .iter()
            .rev()
            .find(|t| t.role == Role::Human)
            .map(|t| t.content.as_str())
    }

    /// Second-level labels, empty slice when untagged.
    pub fn second_level_labels(&self) -> &[String] {
        self.labels.as_ref().map(|l| l.second_level.as_slice()).unwrap_or(&[])
    }

    pub fn first_level_labels(&self) -> &[String] {
        self.labels.as_ref().map(|l| l.first_level.as_slice()).unwrap_or(&[])
    }

    pub fn scores_mut(&mut self) -> &mut ScoreSet {
        self.scores.get_or_insert_with(ScoreSet::default)
    }

    /// Schema checks beyond what serde enforces. Folds unknown top-level keys
    /// into `meta` (explicit `meta` entries win on collision).
    pub fn validate(&mut self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.conversations.is_empty() {
            return Err("conversations is empty".into());
        }
        let mut expect = Role::Human;
        for (i, turn) in self.conversations.iter().enumerate() {
            if turn.content.trim().is_empty() {
                return Err(format!("turn {i} has empty content"));
            }
            match turn.role {
                Role::System if i == 0 => continue,
                Role::System => return Err(format!("system turn at position {i}, only position 0 is allowed")),
                role if role == expect => {
                    expect = if role == Role::Human { Role::Assistant } else { Role::Human };
                }
                role => {
                    return Err(format!(
                        "turn {i} has role {role:?}, conversation must alternate human/assistant starting with human"
                    ))
                }
            }
        }
        match self.conversations.last().map(|t| t.role) {
            Some(Role::Assistant) => {}
            _ => return Err("conversation must end with an assistant turn".into()),
        }
        if let Some(scores) = &self.scores {
            for (name, v) in [
                ("answer_loss", scores.answer_loss),
                ("post_tune_loss", scores.post_tune_loss),
                ("reward", scores.reward),
                ("log_importance_weight", scores.log_importance_weight),
            ] {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(format!("scores.{name} is not finite"));
                    }
                }
            }
            for (name, v) in [("answer_loss", scores.answer_loss), ("post_tune_loss", scores.post_tune_loss)] {
                if let Some(v) = v {
                    if v < 0.0 {
                        return Err(format!("scores.{name} is negative"));
                    }
                }
            }
        }
        if !self.unknown.is_empty() {
            let extra = std::mem::take(&mut self.unknown);
            for (k, v) in extra {
                self.meta.entry(k).or_insert(v);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

/// Parses and validates one JSONL line.
pub fn parse_record(line: &str) -> Result<InstructionRecord, RecordError> {
    let mut record: InstructionRecord =
        serde_json::from_str(line).map_err(|e| RecordError::Json(e.to_string()))?;
    record.validate().map_err(RecordError::Schema)?;
    Ok(record)
}

/// Serializes a record as a single JSONL line. Field order is fixed and map
/// keys are sorted, so output bytes are a pure function of the record.
pub fn record_to_line(record: &InstructionRecord) -> String {
    serde_json::to_string(record).expect("record serialization cannot fail")
}

/// Reject-log entry for a line that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectEntry {
    pub file: String,
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
#[error("{file}:{line_no}: {error}")]
pub struct LineError {
    pub file: String,
    pub line_no: usize,
    #[source]
    pub error: RecordError,
}

impl LineError {
    pub fn to_reject(&self) -> RejectEntry {
        RejectEntry {
            file: self.file.clone(),
            line_no: self.line_no,
            reason: self.error.to_string(),
        }
    }
}

/// Streaming reader over a JSONL dataset. Memory use is independent of file
/// size; each line yields either a record or a positioned error.
pub struct DatasetStream {
    file: String,
    lines: io::Lines<BufReader<File>>,
    line_no: usize,
}

impl Iterator for DatasetStream {
    type Item = Result<InstructionRecord, LineError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.line_no += 1;
                    return Some(Err(LineError {
                        file: self.file.clone(),
                        line_no: self.line_no,
                        error: RecordError::Json(format!("i/o error: {e}")),
                    }));
                }
            };
            self.line_no += 1;
            let trimmed = line.trim_start_matches('\u{feff}');
            if trimmed.trim().is_empty() {
                continue;
            }
            return Some(parse_record(trimmed).map_err(|error| LineError {
                file: self.file.clone(),
                line_no: self.line_no,
                error,
            }));
        }
    }
}

pub fn stream_dataset(path: &Path) -> io::Result<DatasetStream> {
    let file = File::open(path)?;
    Ok(DatasetStream {
        file: path.to_string_lossy().into_owned(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

/// Reads a whole dataset, separating good records from rejects.
pub fn read_dataset(path: &Path) -> io::Result<(Vec<InstructionRecord>, Vec<RejectEntry>)> {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for item in stream_dataset(path)? {
        match item {
            Ok(r) => records.push(r),
            Err(e) => rejects.push(e.to_reject()),
        }
    }
    Ok((records, rejects))
}

/// Appending JSONL writer for reject entries.
pub struct RejectLog {
    writer: BufWriter<File>,
    pub count: u64,
}

impl RejectLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(RejectLog { writer: BufWriter::new(File::create(path)?), count: 0 })
    }

    pub fn push(&mut self, entry: &RejectEntry) -> io::Result<()> {
        serde_json::to_writer(&mut self.writer, entry)?;
        self.writer.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<u64> {
        self.writer.flush()?;
        Ok(self.count)
    }
}

/// Writes a dataset atomically: bytes land in a temp file that is renamed
/// into place only after a successful flush. Output is byte-identical for
/// identical input across runs.
pub fn write_dataset<'a, I>(records: I, path: &Path) -> io::Result<()>
where
    I: IntoIterator<Item = &'a InstructionRecord>,
{
    write_lines(records.into_iter().map(record_to_line), path)
}

/// Atomic line-oriented writer used for datasets, manifests, and reports.
pub fn write_lines<I, S>(lines: I, path: &Path) -> io::Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile::NamedTempFile::new_in(&parent)?;
    {
        let mut writer = BufWriter::new(tmp.as_file());
        for line in lines {
            writer.write_all(line.as_ref().as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Atomic whole-file write for JSON reports.
pub fn write_atomic(bytes: &[u8], path: &Path) -> io::Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Distribution of records over turn-count bins 1, (1,5], (5,10], (10,inf).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnHistogram {
    pub bins: [u64; 4],
    pub fractions: [f64; 4],
    pub total: u64,
    pub empty: bool,
}

pub const TURN_BIN_LABELS: [&str; 4] = ["1", "(1,5]", "(5,10]", "(10,inf)"];

impl TurnHistogram {
    pub fn from_counts(bins: [u64; 4]) -> Self {
        let total: u64 = bins.iter().sum();
        let fractions = if total == 0 {
            [0.0; 4]
        } else {
            [
                bins[0] as f64 / total as f64,
                bins[1] as f64 / total as f64,
                bins[2] as f64 / total as f64,
                bins[3] as f64 / total as f64,
            ]
        };
        TurnHistogram { bins, fractions, total, empty: total == 0 }
    }

    pub fn bin_for(turns: usize) -> usize {
        match turns {
            0 | 1 => 0,
            2..=5 => 1,
            6..=10 => 2,
            _ => 3,
        }
    }
}

/// Computes the turn histogram over a record stream.
pub fn turn_stats<'a, I>(records: I) -> TurnHistogram
where
    I: IntoIterator<Item = &'a InstructionRecord>,
{
    let mut bins = [0u64; 4];
    for r in records {
        bins[TurnHistogram::bin_for(r.turn_count())] += 1;
    }
    TurnHistogram::from_counts(bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, turns: usize) -> InstructionRecord {
        let mut conv = Vec::new();
        for i in 0..turns {
            conv.push(Turn::new(Role::Human, format!("question {i}")));
            conv.push(Turn::new(Role::Assistant, format!("answer {i}")));
        }
        InstructionRecord::new(id, "unit", Domain::Chat, conv)
    }

    #[test]
    fn test_parse_single_turn_record() {
        let line = r#"{"id":"a","source":"s","domain":"code","conversations":[{"role":"human","content":"hi"},{"role":"assistant","content":"yo"}]}"#;
        let r = parse_record(line).unwrap();
        assert_eq!(r.turn_count(), 1);
        assert_eq!(r.domain, Domain::Code);
    }

    #[test]
    fn test_empty_conversations_rejected() {
        let line = r#"{"id":"a","source":"s","domain":"code","conversations":[]}"#;
        let err = parse_record(line).unwrap_err();
        assert!(matches!(err, RecordError::Schema(_)), "{err}");
    }

    #[test]
    fn test_role_order_enforced() {
        // assistant first
        let line = r#"{"id":"a","source":"s","domain":"chat","conversations":[{"role":"assistant","content":"x"}]}"#;
        assert!(parse_record(line).is_err());
        // ends on human
        let line = r#"{"id":"a","source":"s","domain":"chat","conversations":[{"role":"human","content":"x"}]}"#;
        assert!(parse_record(line).is_err());
        // consecutive human turns
        let line = r#"{"id":"a","source":"s","domain":"chat","conversations":[{"role":"human","content":"x"},{"role":"human","content":"y"},{"role":"assistant","content":"z"}]}"#;
        assert!(parse_record(line).is_err());
        // leading system turn is fine
        let line = r#"{"id":"a","source":"s","domain":"chat","conversations":[{"role":"system","content":"be nice"},{"role":"human","content":"x"},{"role":"assistant","content":"y"}]}"#;
        let r = parse_record(line).unwrap();
        assert_eq!(r.turn_count(), 1);
    }

    #[test]
    fn test_whitespace_content_rejected() {
        let line = r#"{"id":"a","source":"s","domain":"chat","conversations":[{"role":"human","content":"  "},{"role":"assistant","content":"y"}]}"#;
        assert!(parse_record(line).is_err());
    }

    #[test]
    fn test_three_exchanges_count_three() {
        assert_eq!(record("r", 3).turn_count(), 3);
    }

    #[test]
    fn test_unknown_fields_preserved_in_meta() {
        let line = r#"{"id":"a","source":"s","domain":"math","extra_key":42,"conversations":[{"role":"human","content":"x"},{"role":"assistant","content":"y"}]}"#;
        let r = parse_record(line).unwrap();
        assert_eq!(r.meta.get("extra_key"), Some(&Value::from(42)));
        let reparsed = parse_record(&record_to_line(&r)).unwrap();
        assert_eq!(reparsed, r);
    }

    #[test]
    fn test_stream_counts_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let mut lines: Vec<String> = (0..10).map(|i| record_to_line(&record(&format!("r{i}"), 1))).collect();
        lines[4] = "{not json".to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let (records, rejects) = read_dataset(&path).unwrap();
        assert_eq!(records.len(), 9);
        assert_eq!(rejects.len(), 1);
        assert_eq!(rejects[0].line_no, 5);
        assert!(rejects[0].reason.contains("invalid JSON"));
    }

    #[test]
    fn test_stream_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let (records, rejects) = read_dataset(&path).unwrap();
        assert!(records.is_empty());
        assert!(rejects.is_empty());
    }

    #[test]
    fn test_turn_histogram_mixed() {
        // 7 singles, 2 of three turns, 1 of six turns -> 0.7 / 0.2 / 0.1 / 0.0
        let mut records = Vec::new();
        for i in 0..7 {
            records.push(record(&format!("s{i}"), 1));
        }
        for i in 0..2 {
            records.push(record(&format!("m{i}"), 3));
        }
        records.push(record("l0", 6));
        let h = turn_stats(records.iter());
        assert_eq!(h.bins, [7, 2, 1, 0]);
        assert!((h.fractions[0] - 0.7).abs() < 1e-12);
        assert!((h.fractions[1] - 0.2).abs() < 1e-12);
        assert!((h.fractions[2] - 0.1).abs() < 1e-12);
        assert_eq!(h.fractions[3], 0.0);
    }

    #[test]
    fn test_turn_histogram_empty_stream() {
        let h = turn_stats(std::iter::empty());
        assert!(h.empty);
        assert_eq!(h.fractions, [0.0; 4]);
    }

    #[test]
    fn test_histogram_replays_released_foundational_counts() {
        // Published single-turn share of the released 7.4M-scale dataset.
        let h = TurnHistogram::from_counts([6_897_934, 466_354, 73_912, 10_906]);
        assert!((h.fractions[0] - 0.926).abs() < 1e-3);
        assert!((h.fractions[1] - 0.063).abs() < 1e-3);
        assert!((h.fractions[2] - 0.010).abs() < 1e-3);
        assert!((h.fractions[3] - 0.001).abs() < 1e-3);
        // And the evolved 1.5M-scale counterpart.
        let g = TurnHistogram::from_counts([1_423_191, 28_211, 4_647, 878]);
        assert!((g.fractions[0] - 0.977).abs() < 1e-3);
    }

    #[test]
    fn test_write_dataset_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut records: Vec<InstructionRecord> = (0..100).map(|i| record(&format!("r{i}"), 1 + i % 4)).collect();
        records[3].meta.insert("z".into(), Value::from("last"));
        records[3].meta.insert("a".into(), Value::from("first"));
        records[7].scores = Some(ScoreSet { answer_loss: Some(1.25), ..Default::default() });
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_dataset(records.iter(), &p1).unwrap();
        write_dataset(records.iter(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (back, rejects) = read_dataset(&p1).unwrap();
        assert!(rejects.is_empty());
        assert_eq!(back, records);
    }

    #[test]
    fn test_write_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.jsonl");
        write_dataset(std::iter::empty(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }
}

//! Corpus records, JSONL I/O, pair lifecycle states and per-pair artifacts.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::agents::{ReviewKind, ReviewRecord, Verdict};
use crate::review_loop::{IterationRecord, LoopOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertLabel {
    Correct,
    Wrong,
    Unlabeled,
}

/// One question with its original, possibly flawed, answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    pub raw_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_label: Option<ExpertLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_answer: Option<String>,
    /// Unknown keys survive a load/save cycle untouched.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// What the cleaning pipeline is allowed to see of a pair. Expert labels are
/// deliberately absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub raw_answer: String,
}

impl QaPair {
    pub fn new(id: impl Into<String>, question: impl Into<String>, raw_answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            raw_answer: raw_answer.into(),
            source: None,
            expert_label: None,
            corrected_answer: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn problem(&self) -> Problem {
        Problem {
            id: self.id.clone(),
            question: self.question.clone(),
            raw_answer: self.raw_answer.clone(),
        }
    }

    /// `Some(true)` for a pair labeled correct, `Some(false)` for wrong.
    pub fn labeled_correct(&self) -> Option<bool> {
        match self.expert_label {
            Some(ExpertLabel::Correct) => Some(true),
            Some(ExpertLabel::Wrong) => Some(false),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: missing required key `{key}`")]
    MissingKey { key: &'static str, line: usize },
    #[error("line {line}: key `{key}` must be a non-empty string")]
    EmptyField { key: &'static str, line: usize },
    #[error("duplicate pair id `{0}`")]
    DuplicateId(String),
    #[error("pair id `{0}` cannot be used as a directory name")]
    UnsafeId(String),
}

const REQUIRED_KEYS: [&str; 3] = ["id", "question", "raw_answer"];

pub fn load_corpus(path: &Path) -> Result<Vec<QaPair>, CorpusError> {
    let file = fs::File::open(path)?;
    read_corpus(BufReader::new(file))
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<QaPair>, CorpusError> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let Value::Object(map) = value else {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: "expected a JSON object".into(),
            });
        };
        check_required(&map, line_no)?;
        let pair: QaPair =
            serde_json::from_value(Value::Object(map)).map_err(|e| CorpusError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
        if !is_safe_id(&pair.id) {
            return Err(CorpusError::UnsafeId(pair.id));
        }
        if !seen.insert(pair.id.clone()) {
            return Err(CorpusError::DuplicateId(pair.id));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

fn check_required(map: &Map<String, Value>, line: usize) -> Result<(), CorpusError> {
    for key in REQUIRED_KEYS {
        match map.get(key) {
            None => return Err(CorpusError::MissingKey { key, line }),
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            Some(_) => return Err(CorpusError::EmptyField { key, line }),
        }
    }
    Ok(())
}

pub fn save_corpus(path: &Path, pairs: &[QaPair]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Ids double as directory names, so separators and dot-only names are refused.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(['/', '\\', '\0'])
        && !id.chars().any(char::is_control)
}

/// Lifecycle of a pair across the cleaning run and expert review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairState {
    Pending,
    InLoop,
    Accepted,
    Rejected,
    ExpertCorrected,
    Requeued,
}

impl PairState {
    pub const ALL: [PairState; 6] = [
        PairState::Pending,
        PairState::InLoop,
        PairState::Accepted,
        PairState::Rejected,
        PairState::ExpertCorrected,
        PairState::Requeued,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PairState::Pending => "pending",
            PairState::InLoop => "in_loop",
            PairState::Accepted => "accepted",
            PairState::Rejected => "rejected",
            PairState::ExpertCorrected => "expert_corrected",
            PairState::Requeued => "requeued",
        }
    }

    pub fn can_transition_to(self, next: PairState) -> bool {
        use PairState::*;
        matches!(
            (self, next),
            (Pending, InLoop)
                | (Requeued, InLoop)
                | (InLoop, Accepted)
                | (InLoop, Rejected)
                | (InLoop, Pending)
                | (Rejected, Accepted)
                | (Rejected, ExpertCorrected)
                | (Rejected, Requeued)
        )
    }

    pub fn transition(self, next: PairState) -> Result<PairState, InvalidTransition> {
        if self.can_transition_to(next) {
            Ok(next)
        } else {
            Err(InvalidTransition { from: self, to: next })
        }
    }
}

impl fmt::Display for PairState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PairState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PairState::ALL
            .into_iter()
            .find(|state| state.as_str() == s)
            .ok_or_else(|| format!("unknown state `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("a pair cannot move from {from} to {to}")]
pub struct InvalidTransition {
    pub from: PairState,
    pub to: PairState,
}

/// Writes everything the loop produced for one pair under `dir/<pair_id>/`.
/// Files carry no timestamps, so two runs over the same script are identical.
pub fn save_run_artifacts(dir: &Path, pair_id: &str, outcome: &LoopOutcome) -> io::Result<PathBuf> {
    if !is_safe_id(pair_id) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("pair id `{pair_id}` cannot be used as a directory name"),
        ));
    }
    let root = dir.join(pair_id);
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    fs::create_dir_all(&root)?;
    let meta = serde_json::json!({
        "pair_id": pair_id,
        "status": outcome.status,
        "iterations": outcome.iterations.len(),
        "counters": outcome.counters,
        "final_solution_available": outcome.final_solution.is_some(),
    });
    write_json(&root.join("meta.json"), &meta)?;
    if let Some(text) = &outcome.final_text {
        fs::write(root.join("final_solution.md"), text)?;
    }
    for record in &outcome.iterations {
        write_iteration(&root, record)?;
    }
    Ok(root)
}

fn write_iteration(root: &Path, record: &IterationRecord) -> io::Result<()> {
    let dir = root.join(format!("iter_{:03}", record.index));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("prompt.txt"), &record.prompt)?;
    fs::write(dir.join("completion.txt"), &record.completion)?;
    for (k, attempt) in record.format_attempts.iter().enumerate() {
        fs::write(dir.join(format!("attempt_{}_completion.txt", k + 1)), attempt)?;
    }
    if let Some(parsed) = &record.parsed {
        write_json(&dir.join("parsed.json"), parsed)?;
    }
    if record.parsed.is_none() || !record.violations.is_empty() {
        write_json(&dir.join("violations.json"), &record.violations)?;
    }
    for review in &record.reviews {
        let name = format!("review_{}", review.kind.as_str());
        fs::write(dir.join(format!("{name}.txt")), &review.reply)?;
        fs::write(dir.join(format!("{name}_prompt.txt")), &review.prompt)?;
        if let Some(issues) = &review.issues {
            fs::write(dir.join(format!("{name}_issues.txt")), issues)?;
        }
    }
    if let Some(report) = &record.bug_report {
        fs::write(dir.join("bug_report.txt"), report)?;
    }
    let summary = serde_json::json!({
        "index": record.index,
        "verdict": record.verdict,
        "format_attempts": record.format_attempts.len() + 1,
        "parsed": record.parsed.is_some(),
        "reviews": record
            .reviews
            .iter()
            .map(|r| serde_json::json!({"kind": r.kind, "verdict": r.verdict}))
            .collect::<Vec<_>>(),
    });
    write_json(&dir.join("record.json"), &summary)
}

#[derive(Deserialize)]
struct RecordSummary {
    index: u32,
    verdict: Verdict,
    format_attempts: usize,
    reviews: Vec<ReviewSummary>,
}

#[derive(Deserialize)]
struct ReviewSummary {
    kind: ReviewKind,
    verdict: Option<Verdict>,
}

/// Reads back what [`save_run_artifacts`] wrote for one pair, in iteration
/// order. Returns an empty list when the pair has no artifacts.
pub fn load_run_artifacts(dir: &Path, pair_id: &str) -> io::Result<Vec<IterationRecord>> {
    let root = dir.join(pair_id);
    if !is_safe_id(pair_id) || !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut iter_dirs: Vec<PathBuf> = fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("iter_")))
        .collect();
    iter_dirs.sort();
    iter_dirs.iter().map(|d| read_iteration(d)).collect()
}

fn read_iteration(dir: &Path) -> io::Result<IterationRecord> {
    let read_opt = |name: &str| match fs::read_to_string(dir.join(name)) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    };
    let json_opt = |name: &str| -> io::Result<Option<Value>> {
        read_opt(name)?
            .map(|t| serde_json::from_str(&t).map_err(io::Error::from))
            .transpose()
    };
    let summary: RecordSummary = serde_json::from_value(json_opt("record.json")?.ok_or_else(|| {
        io::Error::new(io::ErrorKind::NotFound, format!("{} has no record.json", dir.display()))
    })?)
    .map_err(io::Error::from)?;
    let mut format_attempts = Vec::new();
    for k in 1..summary.format_attempts {
        format_attempts.push(read_opt(&format!("attempt_{k}_completion.txt"))?.unwrap_or_default());
    }
    let mut reviews = Vec::new();
    for r in summary.reviews {
        let name = format!("review_{}", r.kind.as_str());
        reviews.push(ReviewRecord {
            kind: r.kind,
            prompt: read_opt(&format!("{name}_prompt.txt"))?.unwrap_or_default(),
            reply: read_opt(&format!("{name}.txt"))?.unwrap_or_default(),
            verdict: r.verdict,
            issues: read_opt(&format!("{name}_issues.txt"))?,
        });
    }
    Ok(IterationRecord {
        index: summary.index,
        prompt: read_opt("prompt.txt")?.unwrap_or_default(),
        completion: read_opt("completion.txt")?.unwrap_or_default(),
        format_attempts,
        parsed: json_opt("parsed.json")?
            .map(serde_json::from_value)
            .transpose()
            .map_err(io::Error::from)?,
        violations: json_opt("violations.json")?
            .map(serde_json::from_value)
            .transpose()
            .map_err(io::Error::from)?
            .unwrap_or_default(),
        reviews,
        verdict: summary.verdict,
        bug_report: read_opt("bug_report.txt")?,
    })
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}

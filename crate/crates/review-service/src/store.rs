//! Run directory as seen by the review service: machine decisions are read
//! once, expert actions live in `expert/` and are replayed on open.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use loca_core::corpus::{load_run_artifacts, PairState, QaPair};
use loca_core::partition::{
    compute_metrics, labels_of, latest_decisions, load_decisions, Metrics, PairDecision, PipelineError,
    ACCEPTED_FILE, DECISIONS_FILE, PAIRS_DIR, REJECTED_FILE, REPORT_FILE,
};
use loca_core::review_loop::IterationRecord;

pub const EXPERT_DIR: &str = "expert";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const REQUEUE_FILE: &str = "requeue.jsonl";
pub const EXPERT_OVERRIDE: &str = "expert_override";

/// Keys the pipeline adds to output rows; dropped before a pair re-enters a corpus.
const PIPELINE_KEYS: [&str; 6] = [
    "decision",
    "internal_coherence",
    "external_consistency",
    "refined_solution",
    "provenance",
    "reviewer",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertAction {
    ConfirmReject,
    CorrectAndRequeue,
    AcceptAsIs,
}

impl ExpertAction {
    pub fn target(self) -> PairState {
        match self {
            ExpertAction::ConfirmReject => PairState::ExpertCorrected,
            ExpertAction::CorrectAndRequeue => PairState::Requeued,
            ExpertAction::AcceptAsIs => PairState::Accepted,
        }
    }
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertVerdict {
    pub pair_id: String,
    pub action: ExpertAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_answer: Option<String>,
    pub reviewer: String,
    #[serde(default)]
    pub note: String,
    pub submitted_at: String,
}

impl ExpertVerdict {
    pub fn validate(&self) -> Result<(), String> {
        if self.reviewer.trim().is_empty() {
            return Err("reviewer must not be empty".into());
        }
        let corrected = self.corrected_answer.as_deref().unwrap_or("");
        if self.action == ExpertAction::CorrectAndRequeue && corrected.trim().is_empty() {
            return Err("correct_and_requeue needs a non-empty corrected_answer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStatus {
    pub pair_id: String,
    pub state: PairState,
    pub iterations_used: u32,
    pub decided_at: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PairEntry {
    pub pair: QaPair,
    pub decision: Option<PairDecision>,
    pub state: PairState,
    pub decided_at: Option<String>,
}

impl PairEntry {
    pub fn status(&self) -> PairStatus {
        PairStatus {
            pair_id: self.pair.id.clone(),
            state: self.state,
            iterations_used: self.decision.as_ref().map_or(0, |d| d.iterations),
            decided_at: self.decided_at.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("unknown pair `{0}`")]
    NotFound(String),
    #[error("pair `{id}` is {state}, only rejected pairs take a verdict")]
    Conflict { id: String, state: PairState },
    #[error("{0}")]
    Invalid(String),
}

pub struct RunStore {
    dir: PathBuf,
    pairs: BTreeMap<String, PairEntry>,
    audit: Vec<ExpertVerdict>,
    report: Option<serde_json::Value>,
}

fn read_rows(path: &Path) -> Result<Vec<QaPair>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn append_line(path: &Path, value: &impl Serialize) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    file.sync_data()
}

impl RunStore {
    /// Loads a finished run and replays the audit log over it.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let records = load_decisions(&dir.join(DECISIONS_FILE))?;
        let latest = latest_decisions(&records);
        let decided_at: BTreeMap<String, String> = records
            .into_iter()
            .map(|r| (r.pair.pair_id, r.decided_at))
            .collect();
        let mut pairs = BTreeMap::new();
        for file in [ACCEPTED_FILE, REJECTED_FILE] {
            for row in read_rows(&dir.join(file))? {
                if row.extra.get("provenance").and_then(|v| v.as_str()) == Some(EXPERT_OVERRIDE) {
                    continue;
                }
                let Some(decision) = latest.get(&row.id).cloned() else {
                    continue;
                };
                let entry = PairEntry {
                    state: decision.decision.state(),
                    decided_at: decided_at.get(&row.id).cloned(),
                    decision: Some(decision),
                    pair: row,
                };
                pairs.insert(entry.pair.id.clone(), entry);
            }
        }
        let report = match fs::read_to_string(dir.join(REPORT_FILE)) {
            Ok(text) => Some(serde_json::from_str(&text).map_err(io::Error::from)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut store = RunStore {
            dir: dir.to_path_buf(),
            pairs,
            audit: Vec::new(),
            report,
        };
        let audit_path = store.audit_path();
        let file = match File::open(&audit_path) {
            Ok(f) => Some(f),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        if let Some(file) = file {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |reason: String| StoreError::Corrupt {
                    path: audit_path.clone(),
                    line: i + 1,
                    reason,
                };
                let verdict: ExpertVerdict = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                store.apply(&verdict).map_err(|e| corrupt(e.to_string()))?;
                store.audit.push(verdict);
            }
        }
        store.reconcile()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn audit_path(&self) -> PathBuf {
        self.dir.join(EXPERT_DIR).join(AUDIT_FILE)
    }

    fn requeue_path(&self) -> PathBuf {
        self.dir.join(EXPERT_DIR).join(REQUEUE_FILE)
    }

    pub fn get(&self, id: &str) -> Option<&PairEntry> {
        self.pairs.get(id)
    }

    /// Pairs in id order, optionally filtered by state.
    pub fn list(&self, state: Option<PairState>) -> impl Iterator<Item = &PairEntry> {
        self.pairs.values().filter(move |e| state.is_none_or(|s| e.state == s))
    }

    pub fn audit_for(&self, id: &str) -> Vec<&ExpertVerdict> {
        self.audit.iter().filter(|v| v.pair_id == id).collect()
    }

    pub fn iterations(&self, id: &str) -> io::Result<Vec<IterationRecord>> {
        load_run_artifacts(&self.dir.join(PAIRS_DIR), id)
    }

    pub fn report(&self) -> Option<&serde_json::Value> {
        self.report.as_ref()
    }

    pub fn state_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for e in self.pairs.values() {
            *counts.entry(e.state.as_str()).or_default() += 1;
        }
        counts
    }

    /// Metrics over the current accepted set, expert overrides included.
    pub fn current_metrics(&self) -> Metrics {
        let rows: Vec<QaPair> = self.pairs.values().map(|e| e.pair.clone()).collect();
        let accepted: Vec<String> = self.list(Some(PairState::Accepted)).map(|e| e.pair.id.clone()).collect();
        compute_metrics(&accepted, &labels_of(&rows))
    }

    /// State change of a verdict, without touching disk.
    fn apply(&mut self, verdict: &ExpertVerdict) -> Result<PairStatus, StoreError> {
        verdict.validate().map_err(StoreError::Invalid)?;
        let entry = self
            .pairs
            .get_mut(&verdict.pair_id)
            .ok_or_else(|| StoreError::NotFound(verdict.pair_id.clone()))?;
        if entry.state != PairState::Rejected {
            return Err(StoreError::Conflict {
                id: verdict.pair_id.clone(),
                state: entry.state,
            });
        }
        entry.state = entry
            .state
            .transition(verdict.action.target())
            .map_err(|e| StoreError::Invalid(e.to_string()))?;
        entry.decided_at = Some(verdict.submitted_at.clone());
        if verdict.action == ExpertAction::CorrectAndRequeue {
            entry.pair.corrected_answer = verdict.corrected_answer.clone();
        }
        Ok(entry.status())
    }

    /// Records a verdict: audit line first, then the derived output files.
    pub fn submit(&mut self, verdict: ExpertVerdict) -> Result<PairStatus, StoreError> {
        let before = self.pairs.get(&verdict.pair_id).cloned();
        let status = self.apply(&verdict)?;
        if let Err(e) = append_line(&self.audit_path(), &verdict) {
            if let Some(before) = before {
                self.pairs.insert(verdict.pair_id.clone(), before);
            }
            return Err(e.into());
        }
        self.audit.push(verdict.clone());
        self.write_side_effect(&verdict)?;
        Ok(status)
    }

    fn clean_row(&self, id: &str) -> QaPair {
        let mut row = self.pairs[id].pair.clone();
        for key in PIPELINE_KEYS {
            row.extra.remove(key);
        }
        row
    }

    fn write_side_effect(&self, verdict: &ExpertVerdict) -> io::Result<()> {
        match verdict.action {
            ExpertAction::ConfirmReject => Ok(()),
            ExpertAction::CorrectAndRequeue => {
                let mut row = self.clean_row(&verdict.pair_id);
                let corrected = verdict.corrected_answer.clone().unwrap_or_default();
                row.raw_answer = corrected.clone();
                row.corrected_answer = Some(corrected);
                append_line(&self.requeue_path(), &row)
            }
            ExpertAction::AcceptAsIs => {
                let mut row = self.clean_row(&verdict.pair_id);
                row.extra.insert("decision".into(), "accepted".into());
                row.extra.insert("provenance".into(), EXPERT_OVERRIDE.into());
                row.extra.insert("reviewer".into(), verdict.reviewer.clone().into());
                append_line(&self.dir.join(ACCEPTED_FILE), &row)
            }
        }
    }

    /// Re-writes output lines that a crash between the audit append and the
    /// side-effect append left out.
    fn reconcile(&self) -> io::Result<()> {
        let requeued: HashSet<String> = read_rows(&self.requeue_path())
            .map_err(|e| io::Error::other(e.to_string()))?
            .into_iter()
            .map(|r| r.id)
            .collect();
        let overridden: HashSet<String> = read_rows(&self.dir.join(ACCEPTED_FILE))
            .map_err(|e| io::Error::other(e.to_string()))?
            .into_iter()
            .filter(|r| r.extra.get("provenance").and_then(|v| v.as_str()) == Some(EXPERT_OVERRIDE))
            .map(|r| r.id)
            .collect();
        for verdict in &self.audit {
            let missing = match verdict.action {
                ExpertAction::CorrectAndRequeue => !requeued.contains(&verdict.pair_id),
                ExpertAction::AcceptAsIs => !overridden.contains(&verdict.pair_id),
                ExpertAction::ConfirmReject => false,
            };
            if missing {
                tracing::warn!(pair = %verdict.pair_id, "restoring output line missing after an interrupted write");
                self.write_side_effect(verdict)?;
            }
        }
        Ok(())
    }
}

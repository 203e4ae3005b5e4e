//! Final decision per pair, the corpus-level pipeline with checkpointing,
//! and the residual error metric.
//!
//! A pair is accepted only when its loop passed and the refined final answer
//! matches the raw answer's. Every decision is appended to
//! `decisions.jsonl` as soon as it is made, so an interrupted run resumes
//! without repeating finished pairs.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tokio::sync::{mpsc, Semaphore};

use crate::agents::AgentConfig;
use crate::consistency::{check_equivalence, ConsistencyConfig, Equivalence, EquivalenceResult};
use crate::corpus::{save_run_artifacts, write_json, ExpertLabel, PairState, Problem, QaPair};
use crate::gateway::Gateway;
use crate::review_loop::{run_loop, LoopConfig, LoopStatus};
use crate::solution::{extract_final_expression, extract_raw_final};

pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const ACCEPTED_FILE: &str = "accepted.jsonl";
pub const REJECTED_FILE: &str = "rejected.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PAIRS_DIR: &str = "pairs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Rejected,
    /// The pair could not be processed, e.g. the model endpoint kept failing.
    /// It is retried on resume and left out of every metric.
    Errored,
}

impl Decision {
    pub fn state(self) -> PairState {
        match self {
            Decision::Accepted => PairState::Accepted,
            Decision::Rejected => PairState::Rejected,
            Decision::Errored => PairState::Pending,
        }
    }
}

/// Accepted exactly when the loop passed and the consistency check matched.
/// An undecided check rejects.
pub fn decide(status: LoopStatus, consistency: Option<&EquivalenceResult>) -> Decision {
    match (status, consistency.map(|c| c.verdict)) {
        (LoopStatus::Passed, Some(Equivalence::Match)) => Decision::Accepted,
        _ => Decision::Rejected,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub pair_id: String,
    pub decision: Decision,
    pub internal_coherence: Option<LoopStatus>,
    pub external_consistency: Option<EquivalenceResult>,
    pub final_solution: Option<String>,
    pub final_expression: Option<String>,
    pub raw_final: Option<String>,
    pub iterations: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub pair: PairDecision,
    pub decided_at: String,
}

/// How a corpus run is scheduled and checkpointed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub workers: usize,
    pub resume: bool,
    /// Stop after deciding this many pairs; the rest stay pending.
    pub max_pairs: Option<usize>,
    /// Timestamp written into decisions instead of the clock.
    pub fixed_timestamp: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            resume: false,
            max_pairs: None,
            fixed_timestamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub loop_cfg: LoopConfig,
    pub agents: AgentConfig,
    pub consistency: ConsistencyConfig,
    pub run: RunOptions,
    pub write_artifacts: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            loop_cfg: LoopConfig::default(),
            agents: AgentConfig::default(),
            consistency: ConsistencyConfig::default(),
            run: RunOptions::default(),
            write_artifacts: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0} already holds decisions; pass resume to continue that run")]
    ExistingRun(PathBuf),
    #[error("{path}:{line}: corrupt decision record: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Runs the loop and, when it passed, the consistency check for one pair.
pub async fn process_pair(
    problem: &Problem,
    gateway: &dyn Gateway,
    cfg: &PipelineConfig,
    artifacts: Option<&Path>,
) -> PairDecision {
    let mut decision = PairDecision {
        pair_id: problem.id.clone(),
        decision: Decision::Errored,
        internal_coherence: None,
        external_consistency: None,
        final_solution: None,
        final_expression: None,
        raw_final: extract_raw_final(&problem.raw_answer),
        iterations: 0,
        error: None,
    };
    let outcome = match run_loop(problem, gateway, &cfg.agents, &cfg.loop_cfg).await {
        Ok(outcome) => outcome,
        Err(err) => {
            decision.iterations = err.iterations.len() as u32;
            decision.error = Some(err.to_string());
            return decision;
        }
    };
    if let Some(dir) = artifacts {
        if let Err(e) = save_run_artifacts(dir, &problem.id, &outcome) {
            tracing::warn!(pair = %problem.id, "could not write artifacts: {e}");
        }
    }
    decision.iterations = outcome.iterations.len() as u32;
    decision.internal_coherence = Some(outcome.status);
    decision.final_solution = outcome.final_text.clone();
    decision.final_expression = outcome.final_solution.as_ref().map(extract_final_expression);

    if outcome.status == LoopStatus::Passed {
        let consistency = match (&decision.final_expression, &decision.raw_final) {
            (Some(refined), Some(raw)) => {
                let judge = Some((gateway, problem.id.as_str(), cfg.agents.model.as_str()));
                match check_equivalence(refined, raw, &problem.question, &cfg.consistency, judge).await {
                    Ok(result) => result,
                    Err(e) => {
                        decision.error = Some(format!("consistency judge failed: {e}"));
                        return decision;
                    }
                }
            }
            _ => EquivalenceResult {
                verdict: Equivalence::Undecided,
                method: crate::consistency::Method::None,
                detail: "no final result to compare".into(),
            },
        };
        decision.external_consistency = Some(consistency);
    }
    decision.decision = decide(outcome.status, decision.external_consistency.as_ref());
    decision
}

fn timestamp(run: &RunOptions) -> String {
    if let Some(ts) = &run.fixed_timestamp {
        return ts.clone();
    }
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok());
    let at = match secs.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(at) => at,
        None => chrono::Utc::now(),
    };
    at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Reads `decisions.jsonl`. A torn final line, left by a crash mid-write, is
/// dropped; corruption anywhere else is an error.
pub fn load_decisions(path: &Path) -> Result<Vec<DecisionRecord>, PipelineError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut records = Vec::new();
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(record) => records.push(record),
            Err(_) if Some(i) == last => {
                tracing::warn!("dropping incomplete last line of {}", path.display());
            }
            Err(e) => {
                return Err(PipelineError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(records)
}

/// Latest decision per pair.
pub fn latest_decisions(records: &[DecisionRecord]) -> HashMap<String, PairDecision> {
    records
        .iter()
        .map(|r| (r.pair.pair_id.clone(), r.pair.clone()))
        .collect()
}

/// Rewrites the decisions file without a torn tail so appends start clean.
fn compact_decisions(path: &Path, records: &[DecisionRecord]) -> io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut out = io::BufWriter::new(File::create(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    fs::rename(tmp, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `loca`, an ablation name, or a baseline kind.
    pub method: String,
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub errored: usize,
    /// Pairs with no final decision yet, in corpus order.
    pub pending: Vec<String>,
    /// Decisions made by this invocation, as opposed to loaded on resume.
    pub processed_now: usize,
    pub metrics: Metrics,
}

/// Decides one pair; implemented by the main loop and by every baseline.
#[async_trait]
pub trait PairProcessor: Send + Sync {
    async fn process(&self, problem: &Problem) -> PairDecision;
}

struct LoopProcessor {
    gateway: Arc<dyn Gateway>,
    cfg: PipelineConfig,
    artifacts: Option<PathBuf>,
}

#[async_trait]
impl PairProcessor for LoopProcessor {
    async fn process(&self, problem: &Problem) -> PairDecision {
        process_pair(problem, self.gateway.as_ref(), &self.cfg, self.artifacts.as_deref()).await
    }
}

pub async fn run_pipeline(
    pairs: &[QaPair],
    gateway: Arc<dyn Gateway>,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<RunReport, PipelineError> {
    cfg.loop_cfg.validate().map_err(PipelineError::Config)?;
    let processor = LoopProcessor {
        gateway,
        cfg: cfg.clone(),
        artifacts: cfg.write_artifacts.then(|| out_dir.join(PAIRS_DIR)),
    };
    run_pairs(pairs, Arc::new(processor), &cfg.run, cfg.loop_cfg.ablation.as_str(), out_dir).await
}

/// Shared driver: schedules undecided pairs on a bounded worker pool and
/// appends each decision to the checkpoint from a single writer.
pub async fn run_pairs(
    pairs: &[QaPair],
    processor: Arc<dyn PairProcessor>,
    run: &RunOptions,
    method: &str,
    out_dir: &Path,
) -> Result<RunReport, PipelineError> {
    if run.workers == 0 {
        return Err(PipelineError::Config("workers must be at least 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let decisions_path = out_dir.join(DECISIONS_FILE);
    let mut records = load_decisions(&decisions_path)?;
    if !records.is_empty() && !run.resume {
        return Err(PipelineError::ExistingRun(decisions_path));
    }
    if decisions_path.exists() {
        compact_decisions(&decisions_path, &records)?;
    }

    let finished: HashSet<String> = latest_decisions(&records)
        .into_values()
        .filter(|d| d.decision != Decision::Errored)
        .map(|d| d.pair_id)
        .collect();
    let todo: Vec<Problem> = pairs
        .iter()
        .filter(|p| !finished.contains(&p.id))
        .take(run.max_pairs.unwrap_or(usize::MAX))
        .map(QaPair::problem)
        .collect();
    tracing::info!(
        total = pairs.len(),
        finished = finished.len(),
        scheduled = todo.len(),
        "starting run"
    );

    let scheduled = todo.len();
    let run_shared = Arc::new(run.clone());
    let permits = Arc::new(Semaphore::new(run.workers));
    let (tx, mut rx) = mpsc::channel::<DecisionRecord>(run.workers * 2);
    for problem in todo {
        let (processor, run, permits, tx) = (
            processor.clone(),
            run_shared.clone(),
            permits.clone(),
            tx.clone(),
        );
        tokio::spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore stays open");
            let pair = processor.process(&problem).await;
            let record = DecisionRecord {
                pair,
                decided_at: timestamp(&run),
            };
            // The receiver outlives every sender, so this only fails on panic.
            let _ = tx.send(record).await;
        });
    }
    drop(tx);

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&decisions_path)?;
    let mut processed_now = 0;
    while let Some(record) = rx.recv().await {
        let mut line = serde_json::to_string(&record).map_err(io::Error::from)?;
        line.push('\n');
        log.write_all(line.as_bytes())?;
        log.flush()?;
        tracing::info!(pair = %record.pair.pair_id, decision = ?record.pair.decision, "decided");
        records.push(record);
        processed_now += 1;
    }
    log.sync_data()?;
    if processed_now < scheduled {
        return Err(PipelineError::Io(io::Error::other(
            "a worker stopped before recording its decision",
        )));
    }

    write_outputs(pairs, &records, method, processed_now, out_dir)
}

/// Writes the accepted and rejected corpora and the report, in corpus order.
pub fn write_outputs(
    pairs: &[QaPair],
    records: &[DecisionRecord],
    method: &str,
    processed_now: usize,
    out_dir: &Path,
) -> Result<RunReport, PipelineError> {
    let latest = latest_decisions(records);
    let mut accepted = io::BufWriter::new(File::create(out_dir.join(ACCEPTED_FILE))?);
    let mut rejected = io::BufWriter::new(File::create(out_dir.join(REJECTED_FILE))?);
    let mut counts = BTreeMap::<Decision, usize>::new();
    let mut pending = Vec::new();
    let mut accepted_ids = Vec::new();
    for pair in pairs {
        let Some(d) = latest.get(&pair.id) else {
            pending.push(pair.id.clone());
            continue;
        };
        *counts.entry(d.decision).or_default() += 1;
        let mut row = pair.clone();
        row.extra.insert("decision".into(), serde_json::to_value(d.decision).unwrap());
        match d.decision {
            Decision::Accepted => {
                accepted_ids.push(pair.id.clone());
                if let Some(text) = &d.final_solution {
                    row.extra.insert("refined_solution".into(), text.clone().into());
                }
                serde_json::to_writer(&mut accepted, &row).map_err(io::Error::from)?;
                accepted.write_all(b"\n")?;
            }
            Decision::Rejected => {
                row.extra.insert(
                    "internal_coherence".into(),
                    serde_json::to_value(d.internal_coherence).unwrap(),
                );
                row.extra.insert(
                    "external_consistency".into(),
                    serde_json::to_value(&d.external_consistency).unwrap(),
                );
                serde_json::to_writer(&mut rejected, &row).map_err(io::Error::from)?;
                rejected.write_all(b"\n")?;
            }
            Decision::Errored => pending.push(pair.id.clone()),
        }
    }
    accepted.flush()?;
    rejected.flush()?;
    let labels = labels_of(pairs);
    let report = RunReport {
        method: method.to_string(),
        total: pairs.len(),
        accepted: counts.get(&Decision::Accepted).copied().unwrap_or(0),
        rejected: counts.get(&Decision::Rejected).copied().unwrap_or(0),
        errored: counts.get(&Decision::Errored).copied().unwrap_or(0),
        pending,
        processed_now,
        metrics: compute_metrics(&accepted_ids, &labels),
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn labels_of(pairs: &[QaPair]) -> HashMap<String, ExpertLabel> {
    pairs
        .iter()
        .filter_map(|p| p.expert_label.map(|l| (p.id.clone(), l)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accepted: usize,
    pub labeled_accepted: usize,
    pub wrong_accepted: usize,
    /// Wrong-labeled share of the labeled accepted pairs.
    pub residual_error_rate: Option<f64>,
    /// Share of accepted pairs that carry a correct/wrong label.
    pub labeled_coverage: Option<f64>,
    /// `X.XX% (N)` with N the labeled accepted count.
    pub display: String,
}

pub fn compute_metrics(accepted_ids: &[String], labels: &HashMap<String, ExpertLabel>) -> Metrics {
    let mut labeled = 0;
    let mut wrong = 0;
    for id in accepted_ids {
        match labels.get(id) {
            Some(ExpertLabel::Correct) => labeled += 1,
            Some(ExpertLabel::Wrong) => {
                labeled += 1;
                wrong += 1;
            }
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Metrics {
        accepted: accepted_ids.len(),
        labeled_accepted: labeled,
        wrong_accepted: wrong,
        residual_error_rate: ratio(wrong, labeled),
        labeled_coverage: ratio(labeled, accepted_ids.len()),
        display: format_rate(wrong, labeled),
    }
}

/// `num/den` as a percentage with two decimals, rounded half up in integer
/// arithmetic, followed by the denominator.
pub fn format_rate(num: usize, den: usize) -> String {
    if den == 0 {
        return "n/a (0)".to_string();
    }
    let (num, den) = (num as u128, den as u128);
    let hundredths = (num * 10_000 * 2 + den) / (2 * den);
    format!("{}.{:02}% ({den})", hundredths / 100, hundredths % 100)
}

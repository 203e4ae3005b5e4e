mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use common::*;
use loca_core::agents::AgentConfig;
use loca_core::corpus::{load_run_artifacts, save_run_artifacts, ExpertLabel, QaPair};
use loca_core::review_loop::{run_loop, LoopConfig};
use async_trait::async_trait;
use loca_core::gateway::{CallCounter, CompletionRequest, CompletionResponse, Gateway, GatewayError};
use loca_core::partition::{
    load_decisions, run_pipeline, Decision, PipelineConfig, PipelineError, ACCEPTED_FILE, DECISIONS_FILE,
    PAIRS_DIR, REJECTED_FILE, REPORT_FILE,
};

fn corpus() -> Vec<QaPair> {
    let mut pairs: Vec<QaPair> = ["a", "b", "c", "d"].iter().map(|id| apple_pair(id)).collect();
    pairs[0].expert_label = Some(ExpertLabel::Correct);
    pairs[1].expert_label = Some(ExpertLabel::Wrong);
    pairs[0].extra.insert("source_page".into(), 12.into());
    pairs
}

/// `b` fails its reviews five times, everything else passes first time.
fn plans() -> HashMap<String, Vec<bool>> {
    HashMap::from([("b".to_string(), vec![false; 5]), ("c".to_string(), vec![false, true, true, true])])
}

fn config(workers: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.run.workers = workers;
    cfg.run.fixed_timestamp = Some("2025-01-01T00:00:00Z".into());
    cfg
}

#[tokio::test]
async fn partitions_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&corpus(), Arc::new(verdict_gateway(plans())), &config(3), dir.path())
        .await
        .unwrap();
    assert_eq!((report.total, report.accepted, report.rejected, report.errored), (4, 3, 1, 0));
    assert_eq!(report.method, "loca");
    assert_eq!(report.metrics.display, "0.00% (1)");

    let accepted = read_jsonl(&dir.path().join(ACCEPTED_FILE));
    let ids: Vec<&str> = accepted.iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "c", "d"]);
    assert_eq!(accepted[0]["source_page"], 12);
    assert!(accepted[0]["refined_solution"].as_str().unwrap().starts_with("# Refined Solution"));
    let rejected = read_jsonl(&dir.path().join(REJECTED_FILE));
    assert_eq!(rejected.len(), 1);
    assert_eq!(rejected[0]["id"], "b");
    assert_eq!(rejected[0]["internal_coherence"], "failed");
    assert!(rejected[0]["external_consistency"].is_null());

    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk["accepted"], 3);
    let meta = std::fs::read_to_string(dir.path().join(PAIRS_DIR).join("c/meta.json")).unwrap();
    assert!(meta.contains("\"iterations\": 4"), "{meta}");
}

#[tokio::test]
async fn outputs_do_not_depend_on_worker_count() {
    let mut snapshots = Vec::new();
    for workers in [1, 4] {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&corpus(), Arc::new(verdict_gateway(plans())), &config(workers), dir.path())
            .await
            .unwrap();
        let mut snap = snapshot(dir.path());
        // Decisions are appended in completion order.
        let decisions = snap.remove(std::path::Path::new(DECISIONS_FILE)).unwrap();
        let mut lines: Vec<&[u8]> = decisions.split(|&b| b == b'\n').collect();
        lines.sort();
        snapshots.push((snap, lines.concat()));
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[tokio::test]
async fn refuses_to_overwrite_without_resume() {
    let dir = tempfile::tempdir().unwrap();
    let gw: Arc<dyn Gateway> = Arc::new(verdict_gateway(plans()));
    run_pipeline(&corpus(), gw.clone(), &config(2), dir.path()).await.unwrap();
    let err = run_pipeline(&corpus(), gw, &config(2), dir.path()).await.unwrap_err();
    assert!(matches!(err, PipelineError::ExistingRun(_)));
}

/// Fails every call for pair `c` while the outage lasts.
struct Flaky<G> {
    inner: G,
    outage: Arc<AtomicBool>,
}

#[async_trait]
impl<G: Gateway> Gateway for Flaky<G> {
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        if req.scope == "c" && self.outage.load(Ordering::SeqCst) {
            return Err(GatewayError::Transport("connection reset".into()));
        }
        self.inner.complete(req).await
    }
}

#[tokio::test]
async fn errored_pairs_are_retried_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let outage = Arc::new(AtomicBool::new(true));
    let gw = Arc::new(CallCounter::new(Flaky {
        inner: verdict_gateway(HashMap::new()),
        outage: outage.clone(),
    }));

    let report = run_pipeline(&corpus(), gw.clone(), &config(2), dir.path()).await.unwrap();
    assert_eq!((report.accepted, report.errored), (3, 1));
    assert_eq!(report.pending, vec!["c".to_string()]);
    let records = load_decisions(&dir.path().join(DECISIONS_FILE)).unwrap();
    let c = records.iter().find(|r| r.pair.pair_id == "c").unwrap();
    assert_eq!(c.pair.decision, Decision::Errored);
    assert!(c.pair.error.as_ref().unwrap().contains("connection reset"));

    outage.store(false, Ordering::SeqCst);
    let before = gw.total();
    let mut cfg = config(2);
    cfg.run.resume = true;
    let report = run_pipeline(&corpus(), gw.clone(), &cfg, dir.path()).await.unwrap();
    assert_eq!((report.accepted, report.errored, report.processed_now), (4, 0, 1));
    assert!(report.pending.is_empty());
    assert_eq!(gw.total() - before, gw.for_scope("c") - 1);
}

#[tokio::test]
async fn torn_checkpoint_tail_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(1);
    cfg.run.max_pairs = Some(2);
    run_pipeline(&corpus(), Arc::new(verdict_gateway(plans())), &cfg, dir.path()).await.unwrap();
    let path = dir.path().join(DECISIONS_FILE);
    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(b"{\"pair\": {\"pair_id\": \"c\", \"deci")
        .unwrap();
    assert_eq!(load_decisions(&path).unwrap().len(), 2);

    cfg.run.max_pairs = None;
    cfg.run.resume = true;
    let gw = Arc::new(CallCounter::new(verdict_gateway(plans())));
    let report = run_pipeline(&corpus(), gw.clone(), &cfg, dir.path()).await.unwrap();
    assert_eq!(report.processed_now, 2);
    assert_eq!(gw.for_scope("a") + gw.for_scope("b"), 0);
    assert_eq!(load_decisions(&path).unwrap().len(), 4);
    assert!(std::fs::read_to_string(&path).unwrap().lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[tokio::test]
async fn corruption_before_the_tail_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(DECISIONS_FILE);
    std::fs::write(&path, "not json\n{}\n").unwrap();
    match load_decisions(&path).unwrap_err() {
        PipelineError::Corrupt { line, .. } => assert_eq!(line, 1),
        other => panic!("unexpected {other}"),
    }
}

#[tokio::test]
async fn artifacts_read_back_as_written() {
    let dir = tempfile::tempdir().unwrap();
    let problem = apple_pair("c").problem();
    let gw = verdict_gateway(plans());
    let outcome = run_loop(&problem, &gw, &AgentConfig::default(), &LoopConfig::default())
        .await
        .unwrap();
    assert!(outcome.iterations[0].reviews.iter().any(|r| r.issues.is_some()));
    save_run_artifacts(dir.path(), "c", &outcome).unwrap();
    assert_eq!(load_run_artifacts(dir.path(), "c").unwrap(), outcome.iterations);
    assert!(load_run_artifacts(dir.path(), "missing").unwrap().is_empty());
}

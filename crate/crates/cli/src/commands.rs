use anyhow::Context;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use loca_core::baselines::BaselineRunner;
use loca_core::corpus::{load_corpus, ExpertLabel, QaPair};
use loca_core::gateway::{CallCounter, Gateway, RecordingGateway};
use loca_core::partition::{
    compute_metrics, labels_of, latest_decisions, load_decisions, run_pairs, run_pipeline, Decision, Metrics,
    PipelineError, RunReport, ACCEPTED_FILE, DECISIONS_FILE, REJECTED_FILE,
};

use crate::config::Config;
use crate::{BaselineArgs, CleanArgs, RecordArgs, ReportArgs, RunArgs, ServeArgs};

pub enum Failure {
    /// Bad arguments or configuration; exit status 2.
    Usage(String),
    /// Anything that went wrong while running; exit status 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Usage(e.to_string()),
            PipelineError::ExistingRun(_) => Failure::Usage(format!("{e}; pass --resume to continue it")),
            other => Failure::Runtime(other.into()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn existing_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn setup(run: &RunArgs) -> Result<(Config, Vec<QaPair>)> {
    existing_file(&run.corpus, "corpus")?;
    let mut cfg = match &run.config {
        Some(path) => {
            existing_file(path, "config")?;
            Config::load(path).map_err(Failure::Usage)?
        }
        None => Config::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    if let Some(seed) = run.seed {
        cfg.apply_seed(seed);
    }
    if let Some(workers) = run.workers {
        cfg.pipeline.workers = workers;
    }
    if run.max_pairs.is_some() {
        cfg.pipeline.max_pairs = run.max_pairs;
    }
    let pairs = load_corpus(&run.corpus).with_context(|| format!("reading {}", run.corpus.display()))?;
    Ok((cfg, pairs))
}

fn accepted_line(metrics: &Metrics) -> String {
    if metrics.labeled_accepted > 0 {
        format!("accepted: {}", metrics.display)
    } else {
        format!("accepted: {} pairs, none labeled", metrics.accepted)
    }
}

fn print_report(report: &RunReport, calls: usize) {
    println!(
        "{}: {} pairs, {} accepted, {} rejected, {} errored, {} pending",
        report.method,
        report.total,
        report.accepted,
        report.rejected,
        report.errored,
        report.pending.len()
    );
    println!("{}", accepted_line(&report.metrics));
    println!("gateway calls: {calls}");
}

pub async fn clean(args: CleanArgs) -> Result<()> {
    let (cfg, pairs) = setup(&args.run)?;
    let mut pipeline = cfg.pipeline_config();
    pipeline.run.resume = args.run.resume;
    if let Some(ablation) = args.ablation {
        pipeline.loop_cfg.ablation = ablation;
    }
    let gateway = Arc::new(CallCounter::new(cfg.with_cache(cfg.backend()?)?));
    let report = run_pipeline(&pairs, gateway.clone(), &pipeline, &args.run.out).await?;
    print_report(&report, gateway.total());
    Ok(())
}

pub async fn baseline(args: BaselineArgs) -> Result<()> {
    let (cfg, pairs) = setup(&args.run)?;
    let spec = cfg.baseline_spec(args.kind);
    spec.validate().map_err(Failure::Usage)?;
    let gateway = Arc::new(CallCounter::new(cfg.with_cache(cfg.backend()?)?));
    let runner = BaselineRunner {
        gateway: gateway.clone(),
        spec,
        agents: cfg.agents.clone(),
        consistency: cfg.consistency.clone(),
    };
    let mut run = cfg.pipeline_config().run;
    run.resume = args.run.resume;
    let report = run_pairs(&pairs, Arc::new(runner), &run, args.kind.as_str(), &args.run.out).await?;
    print_report(&report, gateway.total());
    Ok(())
}

pub async fn replay_record(args: RecordArgs) -> Result<()> {
    let (cfg, pairs) = setup(&args.run)?;
    let mut pipeline = cfg.pipeline_config();
    pipeline.run.resume = args.run.resume;
    let recorder = Arc::new(RecordingGateway::new(cfg.with_cache(cfg.backend()?)?));
    let gateway = Arc::new(CallCounter::new(recorder.clone() as Arc<dyn Gateway>));
    let outcome = run_pipeline(&pairs, gateway.clone(), &pipeline, &args.run.out).await;
    recorder
        .script()
        .save(&args.script)
        .with_context(|| format!("writing {}", args.script.display()))?;
    let report = outcome?;
    print_report(&report, gateway.total());
    println!("replay script: {}", args.script.display());
    Ok(())
}

/// Expert labels as carried by the partition rows; the first row per id wins.
fn labels_from_partitions(run_dir: &Path) -> anyhow::Result<HashMap<String, ExpertLabel>> {
    let mut labels = HashMap::new();
    for name in [ACCEPTED_FILE, REJECTED_FILE] {
        let path = run_dir.join(name);
        let Ok(file) = std::fs::File::open(&path) else { continue };
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: serde_json::Value =
                serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?;
            let (Some(id), Some(label)) = (row["id"].as_str(), row.get("expert_label")) else {
                continue;
            };
            if let Ok(label) = serde_json::from_value::<ExpertLabel>(label.clone()) {
                labels.entry(id.to_string()).or_insert(label);
            }
        }
    }
    Ok(labels)
}

pub fn report(args: ReportArgs) -> Result<()> {
    let decisions_path = args.run_dir.join(DECISIONS_FILE);
    existing_file(&decisions_path, "decision checkpoint")?;
    let labels = match &args.corpus {
        Some(path) => {
            existing_file(path, "corpus")?;
            labels_of(&load_corpus(path).with_context(|| format!("reading {}", path.display()))?)
        }
        None => labels_from_partitions(&args.run_dir)?,
    };
    let latest = latest_decisions(&load_decisions(&decisions_path)?);
    let count = |d: Decision| latest.values().filter(|p| p.decision == d).count();
    let mut accepted: Vec<String> = latest
        .values()
        .filter(|p| p.decision == Decision::Accepted)
        .map(|p| p.pair_id.clone())
        .collect();
    accepted.sort();
    let metrics = compute_metrics(&accepted, &labels);
    if args.json {
        let text = serde_json::to_string_pretty(&metrics).context("serializing metrics")?;
        println!("{text}");
    } else {
        println!(
            "{} decided: {} accepted, {} rejected, {} errored",
            latest.len(),
            count(Decision::Accepted),
            count(Decision::Rejected),
            count(Decision::Errored)
        );
        println!("{}", accepted_line(&metrics));
    }
    Ok(())
}

pub async fn serve(args: ServeArgs) -> Result<()> {
    if !args.run_dir.is_dir() {
        return Err(Failure::Usage(format!("run directory not found: {}", args.run_dir.display())));
    }
    let app = loca_review_service::app(&args.run_dir, args.static_dir)
        .with_context(|| format!("opening {}", args.run_dir.display()))?;
    let listener = tokio::net::TcpListener::bind(args.addr)
        .await
        .with_context(|| format!("binding {}", args.addr))?;
    let addr = listener.local_addr().context("reading the bound address")?;
    println!("listening on http://{addr}");
    std::io::stdout().flush().context("writing to stdout")?;
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("serving")?;
    Ok(())
}

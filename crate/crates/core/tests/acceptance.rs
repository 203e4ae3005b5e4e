//! Acceptance harness: one line per criterion, non-zero exit on any failure.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::runtime::Runtime;

use common::*;
use loca_core::baselines::{BaselineKind, BaselineRunner, BaselineSpec};
use loca_core::consistency::{
    check_equivalence, expr, ConsistencyConfig, ConsistencyMode, Equivalence, EquivalenceResult, Method,
};
use loca_core::corpus::{ExpertLabel, Problem, QaPair};
use loca_core::gateway::{tags, CallCounter, Gateway, ReplayGateway, ReplayScript};
use loca_core::partition::{
    compute_metrics, decide, format_rate, run_pairs, run_pipeline, Decision, PairDecision, PairProcessor,
    PipelineConfig, RunOptions, ACCEPTED_FILE, DECISIONS_FILE, REJECTED_FILE,
};
use loca_core::review_loop::{run_loop, Counters, LoopConfig, LoopStatus};
use loca_core::agents::{AgentConfig, Verdict};
use loca_core::solution::{
    analyze, count_display_blocks, extract_final_expression, extract_raw_final, parse_generic_solution, parse_refined_solution,
    render_solution,
};

type Criterion = fn(&Runtime);

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: [(&str, u64, Criterion); 8] = [
        ("loop state machine is exhaustive and bounded", 5, state_machine),
        ("parser fixtures, round trip and fuzzing", 30, parser_suite),
        ("electrolyte example replays end to end", 5, electrolyte_replay),
        ("metrics arithmetic reproduces the published rates", 1, metrics_arithmetic),
        ("decision rule and partition invariants", 10, decision_partition),
        ("consistency checker soundness", 30, consistency_soundness),
        ("baseline contracts", 10, baseline_contracts),
        ("resume issues no calls for finished pairs", 10, resume_economy),
    ];
    let mut failed = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&rt)));
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit);
        let ok = outcome.is_ok() && in_time;
        if !ok {
            failed += 1;
        }
        let note = match (&outcome, in_time) {
            (Err(_), _) => " assertion failed".to_string(),
            (Ok(()), false) => format!(" over the {limit}s budget"),
            _ => String::new(),
        };
        println!(
            "[{}] {name} ({:.2}s){note}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn state_machine(rt: &Runtime) {
    let cfg = LoopConfig::default();
    assert_eq!((cfg.n_corr_max, cfg.n_wrg_max, cfg.max_iterations()), (3, 5, 15));

    let mut longest = 0;
    let mut witnesses = Vec::new();
    for mask in 0u32..1 << 15 {
        let seq: Vec<bool> = (0..15).map(|i| mask >> i & 1 == 1).collect();
        let expected = reference(&seq, 3, 5).expect("every sequence of 15 verdicts terminates");
        let mut counters = Counters::default();
        let mut got = None;
        for (i, &ok) in seq.iter().enumerate() {
            counters.update(if ok { Verdict::Correct } else { Verdict::Wrong });
            if let Some(status) = counters.status(&cfg) {
                got = Some((status == LoopStatus::Passed, i + 1));
                break;
            }
        }
        assert_eq!(got, Some(expected), "sequence {mask:015b}");
        longest = longest.max(expected.1);
        if expected.1 == 15 {
            witnesses.push(seq);
        }
    }
    assert_eq!(longest, 15);
    assert!(!witnesses.is_empty());

    // The real loop, driven through the gateway, agrees with the reference.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut samples: Vec<Vec<bool>> = witnesses.iter().step_by(witnesses.len() / 16 + 1).cloned().collect();
    samples.extend((0..48).map(|_| (0..15).map(|_| rng.gen_bool(0.5)).collect()));
    let plans: HashMap<String, Vec<bool>> =
        samples.iter().enumerate().map(|(i, s)| (format!("s{i}"), s.clone())).collect();
    let gateway = verdict_gateway(plans);
    let agents = AgentConfig::default();
    rt.block_on(async {
        for (i, seq) in samples.iter().enumerate() {
            let problem = apple_pair(&format!("s{i}")).problem();
            let outcome = run_loop(&problem, &gateway, &agents, &cfg).await.unwrap();
            let (passed, len) = reference(seq, 3, 5).unwrap();
            assert_eq!(outcome.iterations.len(), len, "sample {i}");
            assert_eq!(outcome.status == LoopStatus::Passed, passed, "sample {i}");
        }
    });
}

fn parser_suite(_: &Runtime) {
    let apple = parse_refined_solution(&fixture("apple_refined.md")).unwrap();
    assert_eq!(apple.steps.len(), 2);
    assert_eq!(apple.steps[0].principles, vec!["F_g = mg"]);
    assert_eq!(apple.steps[1].principles, vec!["F_{\\text{net}} = ma"]);
    assert_eq!(extract_final_expression(&apple), "a = g");

    let refined = parse_refined_solution(&fixture("electrolyte_refined_1.md")).unwrap();
    assert_eq!(refined.steps.len(), 5);
    assert!(refined.steps.iter().map(|s| s.principles.len()).sum::<usize>() >= 4);
    assert!(extract_final_expression(&refined).contains("arccosh}(D/R)"));
    // Five `$$` displays and one align block, the last display being the result,
    // which the refined format keeps outside its step list.
    let raw = fixture("electrolyte_raw.md");
    assert_eq!(count_display_blocks(&raw), 6);
    assert!(refined.steps.len() >= count_display_blocks(&raw) - 1);

    for name in ["apple_refined.md", "electrolyte_refined_0.md", "electrolyte_refined_1.md", "electrolyte_refined_2.md"] {
        let parsed = parse_refined_solution(&fixture(name)).unwrap();
        let text = render_solution(&parsed).unwrap();
        let reparsed = parse_refined_solution(&text).unwrap();
        assert_eq!(reparsed, parsed, "{name}");
        assert_eq!(render_solution(&reparsed).unwrap(), text, "{name}");
    }

    let corpus: Vec<String> = ["apple_refined.md", "electrolyte_refined_1.md", "electrolyte_raw.md"]
        .iter()
        .map(|n| fixture(n))
        .collect();
    let lines: Vec<&str> = corpus.iter().flat_map(|c| c.lines()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    for round in 0..10_000 {
        let text = if round % 2 == 0 {
            let bytes: Vec<u8> = (0..rng.gen_range(0..512)).map(|_| rng.gen()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            let mut s = String::new();
            for _ in 0..rng.gen_range(1..40) {
                if rng.gen_bool(0.8) {
                    s.push_str(lines[rng.gen_range(0..lines.len())]);
                } else {
                    let junk: Vec<u8> = (0..rng.gen_range(0..12)).map(|_| rng.gen()).collect();
                    s.push_str(&String::from_utf8_lossy(&junk));
                }
                s.push('\n');
            }
            s
        };
        let _ = analyze(&text);
        let _ = parse_generic_solution(&text);
        let _ = extract_raw_final(&text);
        let _ = expr::parse(&text);
        if let Ok(sol) = parse_refined_solution(&text) {
            if let Ok(out) = render_solution(&sol) {
                assert_eq!(parse_refined_solution(&out).as_ref().ok(), Some(&sol));
            }
        }
    }
}

async fn replay_electrolyte(out: &Path) -> ReplayGateway {
    let script = ReplayScript::load(&fixture_path("electrolyte_replay.json")).unwrap();
    let gateway = Arc::new(ReplayGateway::new(script));
    let mut cfg = PipelineConfig::default();
    cfg.run.workers = 1;
    cfg.run.fixed_timestamp = Some("2025-01-01T00:00:00Z".into());
    let report = run_pipeline(&[electrolyte_pair()], gateway.clone(), &cfg, out).await.unwrap();
    assert_eq!((report.accepted, report.rejected, report.errored), (0, 1, 0));
    Arc::try_unwrap(gateway).ok().expect("pipeline released the gateway")
}

fn electrolyte_replay(rt: &Runtime) {
    let (first, second) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let gateway = rt.block_on(replay_electrolyte(first.path()));
    assert!(gateway.remaining().values().all(|&n| n == 0), "script fully consumed");
    rt.block_on(replay_electrolyte(second.path()));

    let decisions = read_jsonl(&first.path().join(DECISIONS_FILE));
    assert_eq!(decisions.len(), 1);
    let d: PairDecision = serde_json::from_value(decisions[0]["pair"].clone()).unwrap();
    assert_eq!(d.iterations, 5);
    assert_eq!(d.internal_coherence, Some(LoopStatus::Passed));
    let consistency = d.external_consistency.as_ref().unwrap();
    assert_eq!(consistency.verdict, Equivalence::Mismatch);
    assert_eq!(d.decision, Decision::Rejected);
    assert!(d.final_expression.as_ref().unwrap().contains("2\\operatorname{arccosh}(D/R)"));
    let raw = d.raw_final.as_ref().unwrap();
    assert!(raw.contains("\\mathrm{arccosh}(D/R)"));
    assert_eq!(consistency.method, Method::Symbolic);

    let iter = |i: u32, file: &str| {
        std::fs::read_to_string(first.path().join(format!("pairs/q-250/iter_{i:03}/{file}"))).ok()
    };
    let report_1 = iter(1, "bug_report.txt").unwrap();
    assert!(report_1.contains(fixture("electrolyte_iter1_summary_assumption.md").trim()));
    assert!(report_1.contains(fixture("electrolyte_iter1_summary_derivation.md").trim()));
    let report_2 = iter(2, "bug_report.txt").unwrap();
    assert!(report_2.contains(fixture("electrolyte_bug_report_2.md").trim()));
    assert!(report_2.contains("No issues found."));
    assert!(iter(2, "prompt.txt").unwrap().contains(&report_1));
    assert!(iter(3, "prompt.txt").unwrap().contains(&report_2));
    for i in 3..=5 {
        assert!(iter(i, "bug_report.txt").is_none());
        assert_eq!(iter(i, "completion.txt").unwrap(), fixture("electrolyte_refined_2.md"));
    }
    assert_eq!(iter(2, "completion.txt").unwrap(), fixture("electrolyte_refined_1.md"));

    assert_eq!(snapshot(first.path()), snapshot(second.path()), "artifacts differ between runs");
}

/// `num/den` in percent, two decimals, half up, via quotient and remainder.
fn rate_oracle(num: u64, den: u64) -> String {
    let (mut q, r) = (num * 10_000 / den, num * 10_000 % den);
    if 2 * r >= den {
        q += 1;
    }
    format!("{}.{:02}% ({den})", q / 100, q % 100)
}

fn metrics_arithmetic(_: &Runtime) {
    for (size, wrong, published) in [(59usize, 1usize, "1.69% (59)"), (48, 3, "6.25% (48)")] {
        let ids: Vec<String> = (0..size).map(|i| format!("p{i}")).collect();
        let labels: HashMap<String, ExpertLabel> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), if i < wrong { ExpertLabel::Wrong } else { ExpertLabel::Correct }))
            .collect();
        let m = compute_metrics(&ids, &labels);
        assert_eq!(m.display, published);
        assert_eq!(m.display, rate_oracle(wrong as u64, size as u64));
        assert_eq!(m.residual_error_rate, Some(wrong as f64 / size as f64));
    }
    for den in 1..=200u64 {
        for num in 0..=den {
            assert_eq!(format_rate(num as usize, den as usize), rate_oracle(num, den));
        }
    }
}

struct Scripted {
    outcomes: HashMap<String, (LoopStatus, Equivalence, u32)>,
}

#[async_trait]
impl PairProcessor for Scripted {
    async fn process(&self, problem: &Problem) -> PairDecision {
        let (status, verdict, yields) = self.outcomes[&problem.id];
        for _ in 0..yields {
            tokio::task::yield_now().await;
        }
        let consistency = (status == LoopStatus::Passed).then(|| EquivalenceResult {
            verdict,
            method: Method::Symbolic,
            detail: String::new(),
        });
        PairDecision {
            pair_id: problem.id.clone(),
            decision: decide(status, consistency.as_ref()),
            internal_coherence: Some(status),
            external_consistency: consistency,
            final_solution: Some("solution".into()),
            final_expression: None,
            raw_final: None,
            iterations: 1,
            error: None,
        }
    }
}

fn decision_partition(rt: &Runtime) {
    let result = |verdict| EquivalenceResult {
        verdict,
        method: Method::Symbolic,
        detail: String::new(),
    };
    for status in [LoopStatus::Passed, LoopStatus::Failed] {
        for verdict in [Equivalence::Match, Equivalence::Mismatch, Equivalence::Undecided] {
            let expected = status == LoopStatus::Passed && verdict == Equivalence::Match;
            assert_eq!(decide(status, Some(&result(verdict))) == Decision::Accepted, expected);
        }
        assert_eq!(decide(status, None), Decision::Rejected);
    }

    let pairs: Vec<QaPair> = (0..100).map(|i| QaPair::new(format!("p{i:03}"), "q", "a")).collect();
    let all: BTreeSet<String> = pairs.iter().map(|p| p.id.clone()).collect();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outcomes: HashMap<String, (LoopStatus, Equivalence, u32)> = pairs
            .iter()
            .map(|p| {
                let status = if rng.gen_bool(0.6) { LoopStatus::Passed } else { LoopStatus::Failed };
                let verdict = [Equivalence::Match, Equivalence::Mismatch, Equivalence::Undecided][rng.gen_range(0..3)];
                (p.id.clone(), (status, verdict, rng.gen_range(0..20)))
            })
            .collect();
        let expected: BTreeSet<String> = outcomes
            .iter()
            .filter(|(_, (s, v, _))| *s == LoopStatus::Passed && *v == Equivalence::Match)
            .map(|(id, _)| id.clone())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let run = RunOptions {
            workers: 1 + (seed as usize % 8),
            ..RunOptions::default()
        };
        let report = rt
            .block_on(run_pairs(&pairs, Arc::new(Scripted { outcomes }), &run, "scripted", dir.path()))
            .unwrap();
        let ids = |file: &str| -> Vec<String> {
            read_jsonl(&dir.path().join(file))
                .iter()
                .map(|v| v["id"].as_str().unwrap().to_string())
                .collect()
        };
        let (accepted, rejected) = (ids(ACCEPTED_FILE), ids(REJECTED_FILE));
        let acc: BTreeSet<String> = accepted.iter().cloned().collect();
        let rej: BTreeSet<String> = rejected.iter().cloned().collect();
        assert_eq!(acc.len(), accepted.len());
        assert!(acc.is_disjoint(&rej), "seed {seed}");
        assert_eq!(acc.union(&rej).cloned().collect::<BTreeSet<_>>(), all, "seed {seed}");
        assert_eq!(acc, expected, "seed {seed}");
        assert!(accepted.windows(2).all(|w| w[0] < w[1]), "corpus order");
        assert!(rejected.windows(2).all(|w| w[0] < w[1]), "corpus order");
        assert_eq!((report.accepted, report.rejected), (acc.len(), rej.len()));
    }
}

#[derive(serde::Deserialize)]
struct ConsistencyCase {
    candidate: String,
    reference: String,
    equivalent: bool,
}

const VARS: [&str; 5] = ["x", "y", "m", "\\theta", "v_0"];

/// Random positive-valued expression tree, spelled two different ways.
fn random_expr(rng: &mut ChaCha8Rng, depth: u32) -> (String, String) {
    if depth == 0 || rng.gen_bool(0.25) {
        return if rng.gen_bool(0.6) {
            let v = VARS[rng.gen_range(0..VARS.len())];
            (v.to_string(), v.to_string())
        } else {
            let n = rng.gen_range(1..10).to_string();
            (n.clone(), n)
        };
    }
    let (a1, a2) = random_expr(rng, depth - 1);
    match rng.gen_range(0..6) {
        0 => {
            let (b1, b2) = random_expr(rng, depth - 1);
            (format!("{a1} + {b1}"), format!("\\left({b2}\\right) + \\left({a2}\\right)"))
        }
        1 => {
            let (b1, b2) = random_expr(rng, depth - 1);
            (format!("\\left({a1}\\right) \\cdot \\left({b1}\\right)"), format!("({a2})({b2})"))
        }
        2 => {
            let (b1, b2) = random_expr(rng, depth - 1);
            (format!("\\frac{{{a1}}}{{{b1}}}"), format!("({a2}) / ({b2})"))
        }
        3 => (format!("\\sqrt{{{a1}}}"), format!("({a2})^{{1/2}}")),
        4 => {
            let k = rng.gen_range(2..4);
            (format!("\\left({a1}\\right)^{{{k}}}"), format!("({a2})^{k}"))
        }
        _ => (format!("\\ln\\left(1 + {a1}\\right)"), format!("\\ln({a2} + 1)")),
    }
}

fn consistency_soundness(rt: &Runtime) {
    let cases: Vec<ConsistencyCase> = serde_json::from_str(&fixture("consistency_pairs.json")).unwrap();
    assert_eq!(cases.len(), 20);
    let cfg = ConsistencyConfig {
        mode: ConsistencyMode::Offline,
        ..ConsistencyConfig::default()
    };
    let check = |a: &str, b: &str| {
        rt.block_on(check_equivalence(a, b, "", &cfg, None)).unwrap().verdict
    };
    let (mut correct, mut false_matches) = (0, 0);
    for case in &cases {
        let verdict = check(&case.candidate, &case.reference);
        match (case.equivalent, verdict) {
            (true, Equivalence::Match) | (false, Equivalence::Mismatch) => correct += 1,
            (false, Equivalence::Match) => false_matches += 1,
            _ => {}
        }
    }
    assert_eq!(false_matches, 0);
    assert!(correct >= 18, "{correct}/20 correct");

    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let exprs: Vec<(String, String)> = (0..1000).map(|_| random_expr(&mut rng, 4)).collect();
    for (a, b) in &exprs {
        assert_eq!(check(a, a), Equivalence::Match, "{a}");
        assert_eq!(check(a, b), Equivalence::Match, "{a} vs {b}");
    }
    for pair in exprs.chunks(2) {
        let (a, b) = (&pair[0].0, &pair[1].1);
        assert_eq!(check(a, b), check(b, a), "{a} vs {b}");
    }
}

fn runner(kind: BaselineKind, script: ReplayScript) -> (BaselineRunner, Arc<CallCounter<ReplayGateway>>) {
    let gateway = Arc::new(CallCounter::new(ReplayGateway::new(script)));
    let runner = BaselineRunner {
        gateway: gateway.clone(),
        spec: BaselineSpec::new(kind),
        agents: AgentConfig::default(),
        consistency: ConsistencyConfig::default(),
    };
    (runner, gateway)
}

fn boxed(expr: &str) -> String {
    format!("Working.\n$$\n\\boxed{{{expr}}}\n$$\n")
}

fn baseline_contracts(rt: &Runtime) {
    let problem = |raw_final: &str| Problem {
        id: "b".into(),
        question: "Find it.".into(),
        raw_answer: boxed(raw_final),
    };

    // review_sc: never more than n reviews, stop at the first failure.
    for mask in 0u32..8 {
        let verdicts: Vec<bool> = (0..3).map(|i| mask >> i & 1 == 1).collect();
        let calls = verdicts.iter().position(|ok| !ok).map_or(3, |i| i + 1);
        let mut script = ReplayScript::default();
        for &ok in &verdicts[..calls] {
            script.push("b", tags::REVIEW_HOLISTIC, if ok { "Fine.\nCorrect" } else { "Off.\nWrong" });
        }
        let (runner, gw) = runner(BaselineKind::ReviewSc, script);
        let d = rt.block_on(runner.filter(&problem("x")));
        assert_eq!(gw.total(), calls, "mask {mask}");
        assert_eq!(d.iterations as usize, calls);
        assert_eq!(d.decision == Decision::Accepted, verdicts.iter().all(|&ok| ok), "mask {mask}");
    }

    // cot_sc: majority over equivalent finals, all-distinct rejects.
    let vote = |finals: &[&str], raw: &str| {
        let mut script = ReplayScript::default();
        for f in finals {
            script.push("b", tags::GENERATE, boxed(f));
        }
        let (runner, gw) = runner(BaselineKind::CotSc, script);
        let d = rt.block_on(runner.filter(&problem(raw)));
        assert_eq!(gw.for_tag(tags::GENERATE), 5);
        assert_eq!(gw.for_tag(tags::JUDGE), 0);
        d
    };
    let d = vote(&["x", "x", "2y", "y + y", "y \\cdot 2"], "2y");
    assert_eq!(d.decision, Decision::Accepted);
    assert_eq!(d.final_expression.as_deref(), Some("2y"));
    assert_eq!(vote(&["x", "x", "2y", "y + y", "y \\cdot 2"], "x").decision, Decision::Rejected);
    let d = vote(&["a", "b", "c", "d", "f"], "a");
    assert_eq!(d.decision, Decision::Rejected);
    assert_eq!(d.external_consistency.unwrap().verdict, Equivalence::Undecided);

    // self_reflection: accepted only when the reviews pass and the final matches.
    let reflect = |script: ReplayScript, raw: &str| {
        let (runner, gw) = runner(BaselineKind::SelfReflection, script);
        let d = rt.block_on(runner.filter(&problem(raw)));
        assert!(gw.inner().remaining().values().all(|&n| n == 0));
        d
    };
    let streak = |script: &mut ReplayScript, failing_at: Option<usize>| {
        for i in 0..3 {
            if Some(i) == failing_at {
                script.push("b", tags::REVIEW_HOLISTIC, "Off by two.\nWrong");
                return;
            }
            script.push("b", tags::REVIEW_HOLISTIC, "Fine.\nCorrect");
        }
    };
    let mut s = ReplayScript::default();
    streak(&mut s, None);
    assert_eq!(reflect(s, "x").decision, Decision::Accepted);

    let mut s = ReplayScript::default();
    streak(&mut s, Some(1));
    s.push("b", tags::REFINE, boxed("2x"));
    streak(&mut s, None);
    let d = reflect(s, "x");
    assert_eq!(d.internal_coherence, Some(LoopStatus::Passed));
    assert_eq!(d.external_consistency.unwrap().verdict, Equivalence::Mismatch);
    assert_eq!(d.decision, Decision::Rejected);

    let mut s = ReplayScript::default();
    streak(&mut s, Some(0));
    s.push("b", tags::REFINE, boxed("x + x"));
    streak(&mut s, None);
    assert_eq!(reflect(s, "2x").decision, Decision::Accepted);

    let mut s = ReplayScript::default();
    for round in 0..5 {
        streak(&mut s, Some(0));
        if round < 4 {
            s.push("b", tags::REFINE, boxed("x"));
        }
    }
    let d = reflect(s, "x");
    assert_eq!(d.internal_coherence, Some(LoopStatus::Failed));
    assert!(d.external_consistency.is_none());
    assert_eq!(d.decision, Decision::Rejected);
}

fn resume_economy(rt: &Runtime) {
    let pairs: Vec<QaPair> = ["r1", "r2", "r3"].iter().map(|id| apple_pair(id)).collect();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.run.workers = 2;
    let run = |cfg: &PipelineConfig| {
        let counter = Arc::new(CallCounter::new(verdict_gateway(HashMap::new())));
        let report = rt.block_on(run_pipeline(&pairs, counter.clone() as Arc<dyn Gateway>, cfg, dir.path()));
        (report.unwrap(), counter)
    };

    cfg.run.max_pairs = Some(2);
    let (report, counter) = run(&cfg);
    assert_eq!(report.processed_now, 2);
    assert_eq!(report.pending, vec!["r3".to_string()]);
    assert!(counter.for_scope("r1") > 0 && counter.for_scope("r2") > 0);
    assert_eq!(counter.for_scope("r3"), 0);

    cfg.run.max_pairs = None;
    cfg.run.resume = true;
    let (report, counter) = run(&cfg);
    assert_eq!(counter.for_scope("r1") + counter.for_scope("r2"), 0);
    assert!(counter.for_scope("r3") > 0);
    assert_eq!(report.processed_now, 1);
    assert!(report.pending.is_empty());

    let (report, counter) = run(&cfg);
    assert_eq!(counter.total(), 0);
    assert_eq!(report.processed_now, 0);
    assert_eq!(read_jsonl(&dir.path().join(DECISIONS_FILE)).len(), 3);
}

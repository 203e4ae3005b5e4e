//! The augment-and-review loop run on every pair.
//!
//! Each iteration asks the augmenter for a refined solution, reviews it, and
//! updates two counters: consecutive correct reviews and cumulative wrong
//! ones. The pair passes once `n_corr_max` reviews in a row succeed and fails
//! once `n_wrg_max` reviews in total have failed, so a loop never runs more
//! than `n_corr_max * n_wrg_max` iterations.

use serde::{Deserialize, Serialize};

use crate::agents::{
    render_augmentation_prompt, render_generic_refine_prompt, AgentConfig, AgentError, Agents,
    BugReport, ReviewKind, ReviewRecord, Verdict,
};
use crate::corpus::Problem;
use crate::gateway::{tags, ChatMessage, Gateway};
use crate::solution::{
    parse_generic_solution, parse_refined_solution, FormatError, FormatViolation,
    StructuredSolution,
};

/// Which agents the loop uses. The default pairs the structured augmenter
/// with the two specialized reviewers; the others swap either side for a
/// generic counterpart.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Loca,
    GenericAugment,
    HolisticReview,
    GenericBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Loca,
        Ablation::GenericAugment,
        Ablation::HolisticReview,
        Ablation::GenericBoth,
    ];

    pub fn structured_augmenter(self) -> bool {
        matches!(self, Ablation::Loca | Ablation::HolisticReview)
    }

    pub fn split_review(self) -> bool {
        matches!(self, Ablation::Loca | Ablation::GenericAugment)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Loca => "loca",
            Ablation::GenericAugment => "generic_augment",
            Ablation::HolisticReview => "holistic_review",
            Ablation::GenericBoth => "generic_both",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub n_corr_max: u32,
    pub n_wrg_max: u32,
    /// Re-prompts allowed when the augmenter's output breaks the grammar.
    pub max_format_retries: u32,
    pub ablation: Ablation,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            n_corr_max: 3,
            n_wrg_max: 5,
            max_format_retries: 2,
            ablation: Ablation::Loca,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_corr_max == 0 || self.n_wrg_max == 0 {
            return Err("n_corr_max and n_wrg_max must be at least 1".into());
        }
        Ok(())
    }

    pub fn max_iterations(&self) -> u32 {
        self.n_corr_max * self.n_wrg_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Passed,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub n_corr: u32,
    pub n_wrg: u32,
}

impl Counters {
    pub fn update(&mut self, verdict: Verdict) {
        match verdict {
            Verdict::Correct => self.n_corr += 1,
            Verdict::Wrong => {
                self.n_wrg += 1;
                self.n_corr = 0;
            }
        }
    }

    pub fn status(&self, cfg: &LoopConfig) -> Option<LoopStatus> {
        if self.n_corr >= cfg.n_corr_max {
            Some(LoopStatus::Passed)
        } else if self.n_wrg >= cfg.n_wrg_max {
            Some(LoopStatus::Failed)
        } else {
            None
        }
    }
}

/// Everything one iteration produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: u32,
    pub prompt: String,
    /// The augmenter output that was kept, after any format retries.
    pub completion: String,
    /// Rejected outputs that preceded `completion`.
    pub format_attempts: Vec<String>,
    pub parsed: Option<StructuredSolution>,
    /// Grammar problems of `completion`; warnings only when it parsed.
    pub violations: Vec<FormatViolation>,
    pub reviews: Vec<ReviewRecord>,
    pub verdict: Verdict,
    /// Report handed to the next iteration, if any.
    pub bug_report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub status: LoopStatus,
    pub counters: Counters,
    pub iterations: Vec<IterationRecord>,
    /// Latest solution that parsed.
    pub final_solution: Option<StructuredSolution>,
    /// Text of that solution as the augmenter wrote it.
    pub final_text: Option<String>,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("loop stopped after {} completed iteration(s): {source}", .iterations.len())]
pub struct LoopError {
    pub iterations: Vec<IterationRecord>,
    #[source]
    pub source: AgentError,
}

pub async fn run_loop(
    problem: &Problem,
    gateway: &dyn Gateway,
    agent_cfg: &AgentConfig,
    cfg: &LoopConfig,
) -> Result<LoopOutcome, LoopError> {
    let agents = Agents::new(gateway, agent_cfg, &problem.id);
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut counters = Counters::default();
    let mut solution_text = problem.raw_answer.clone();
    let mut bug_report: Option<String> = None;
    let mut latest: Option<(StructuredSolution, String)> = None;

    for index in 1..=cfg.max_iterations() {
        let step = iterate(
            &agents,
            problem,
            cfg,
            index,
            &solution_text,
            bug_report.as_deref(),
            &mut counters,
        )
        .await;
        let (record, status) = match step {
            Ok(done) => done,
            Err(source) => return Err(LoopError { iterations, source }),
        };
        tracing::debug!(
            pair = %problem.id,
            iteration = index,
            verdict = ?record.verdict,
            n_corr = counters.n_corr,
            n_wrg = counters.n_wrg,
            "iteration finished"
        );
        if let Some(parsed) = &record.parsed {
            solution_text = record.completion.clone();
            latest = Some((parsed.clone(), record.completion.clone()));
        }
        bug_report = record.bug_report.clone();
        iterations.push(record);
        if let Some(status) = status {
            let (final_solution, final_text) = latest.unzip();
            return Ok(LoopOutcome {
                status,
                counters,
                iterations,
                final_solution,
                final_text,
            });
        }
    }
    unreachable!("counters reach a terminal state within n_corr_max * n_wrg_max iterations")
}

async fn iterate(
    agents: &Agents<'_>,
    problem: &Problem,
    cfg: &LoopConfig,
    index: u32,
    solution_text: &str,
    bug_report: Option<&str>,
    counters: &mut Counters,
) -> Result<(IterationRecord, Option<LoopStatus>), AgentError> {
    let structured = cfg.ablation.structured_augmenter();
    let prompt = if structured {
        render_augmentation_prompt(&problem.question, solution_text, bug_report)
    } else {
        render_generic_refine_prompt(&problem.question, solution_text, bug_report.unwrap_or(""))
    };
    let tag = if structured { tags::AUGMENTATION } else { tags::REFINE };
    let temperature = agents.config().augmentation_temperature;

    let mut messages = vec![ChatMessage::user(prompt.clone())];
    let mut format_attempts = Vec::new();
    let (completion, parsed) = loop {
        let completion = agents.call(tag, messages.clone(), temperature).await?;
        let result = if structured {
            parse_refined_solution(&completion)
        } else {
            parse_generic_solution(&completion)
        };
        match result {
            Ok(solution) => break (completion, Ok(solution)),
            Err(err) if format_attempts.len() < cfg.max_format_retries as usize => {
                messages.push(ChatMessage::assistant(completion.clone()));
                messages.push(ChatMessage::user(format_feedback(&err, structured)));
                format_attempts.push(completion);
            }
            Err(err) => break (completion, Err(err)),
        }
    };

    let mut record = IterationRecord {
        index,
        prompt,
        completion,
        format_attempts,
        parsed: None,
        violations: Vec::new(),
        reviews: Vec::new(),
        verdict: Verdict::Wrong,
        bug_report: None,
    };

    let format_error = match parsed {
        Ok(solution) => {
            if structured {
                record.violations = crate::solution::analyze(&record.completion).violations;
            }
            record.parsed = Some(solution);
            None
        }
        Err(err) => {
            record.violations = err.violations.clone();
            Some(err)
        }
    };

    if format_error.is_none() {
        record.reviews = if cfg.ablation.split_review() {
            let (a, d) = agents.review_both(&problem.question, &record.completion).await?;
            vec![a, d]
        } else {
            vec![
                agents
                    .review(&problem.question, &record.completion, ReviewKind::Holistic)
                    .await?,
            ]
        };
        if record.reviews.iter().all(ReviewRecord::passed) {
            record.verdict = Verdict::Correct;
        }
    }

    counters.update(record.verdict);
    let status = counters.status(cfg);
    if status.is_none() && record.verdict == Verdict::Wrong {
        record.bug_report = Some(match &format_error {
            Some(err) => BugReport::for_format_failure(err).render(),
            None if cfg.ablation.split_review() => {
                agents.compose_bug_report(&mut record.reviews).await?.render()
            }
            None => {
                let review = &mut record.reviews[0];
                let issues = agents.summarize(&review.reply).await?;
                review.issues = Some(issues.clone());
                issues
            }
        });
    }
    Ok((record, status))
}

fn format_feedback(err: &FormatError, structured: bool) -> String {
    let listing = err
        .errors()
        .map(|v| format!("* {v}"))
        .collect::<Vec<_>>()
        .join("\n");
    let ask = if structured {
        "Rewrite the complete refined solution so that it follows every formatting rule. Start with the line `# Refined Solution` and end with the `### Final Answer` section."
    } else {
        "Rewrite the complete solution. The last section must be titled `### Final Answer` and contain the final answer in $$\\boxed{}$$."
    };
    format!("Your previous output does not follow the required format:\n{listing}\n\n{ask}")
}

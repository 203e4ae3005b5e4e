//! Prompt rendering, verdict parsing and the model-backed agents: the
//! augmenter that writes refined solutions, the two reviewers and the
//! summarizer that turns negative reviews into a bug report.

use serde::{Deserialize, Serialize};

use crate::gateway::{tags, ChatMessage, CompletionRequest, Gateway, GatewayError};
use crate::solution::{self, FormatError};

/// Prompt templates, kept byte for byte in `templates/`.
pub mod templates {
    pub const AUGMENTATION: &str = include_str!("../templates/augmentation.txt");
    pub const REVIEWER: &str = include_str!("../templates/reviewer.txt");
    pub const ASSUMPTION_INSTRUCTION: &str = include_str!("../templates/assumption_instruction.txt");
    pub const DERIVATION_INSTRUCTION: &str = include_str!("../templates/derivation_instruction.txt");
    pub const SUMMARIZATION: &str = include_str!("../templates/summarization.txt");
    pub const ISSUES_REPORT: &str = include_str!("../templates/issues_report.txt");
    pub const GENERIC_REFINE: &str = include_str!("../templates/ablation_augmentation.txt");
    pub const HOLISTIC_REVIEWER: &str = include_str!("../templates/ablation_reviewer.txt");
}

/// Written into the issues report for a side whose review passed.
pub const NO_ISSUES: &str = "No issues found.";
/// Written into the derivation slot when the augmenter's output never parsed.
pub const NOT_REVIEWED: &str = "Not reviewed: the solution could not be parsed.";

/// Substitutes `{name}` placeholders in one pass. Braces that do not name a
/// listed placeholder are copied verbatim, and substituted values are never
/// rescanned.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 1..];
        let hit = vars.iter().find(|(name, _)| {
            tail.strip_prefix(name).is_some_and(|t| t.starts_with('}'))
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewKind {
    Assumption,
    Derivation,
    /// Single final-answer review used by the ablation variants.
    Holistic,
}

impl ReviewKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewKind::Assumption => "assumption",
            ReviewKind::Derivation => "derivation",
            ReviewKind::Holistic => "holistic",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ReviewKind::Assumption => tags::REVIEW_ASSUMPTION,
            ReviewKind::Derivation => tags::REVIEW_DERIVATION,
            ReviewKind::Holistic => tags::REVIEW_HOLISTIC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Wrong,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("reply does not end with a `Correct` or `Wrong` line (last line: {last_line:?})")]
pub struct VerdictUnparseable {
    pub last_line: String,
}

/// Reads the verdict from the final non-blank line. Surrounding markdown
/// emphasis and trailing punctuation are ignored; the word itself is
/// case-sensitive.
pub fn parse_verdict(reply: &str) -> Result<Verdict, VerdictUnparseable> {
    let last = reply.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    let markup: &[char] = &['*', '_', '`', '#', '>', '~', '\'', '"'];
    let word = last
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || markup.contains(&c))
        .trim_end_matches(['.', '!', ':', ';', ','])
        .trim_matches(|c: char| c.is_whitespace() || markup.contains(&c));
    match word {
        "Correct" => Ok(Verdict::Correct),
        "Wrong" => Ok(Verdict::Wrong),
        _ => Err(VerdictUnparseable {
            last_line: last.to_string(),
        }),
    }
}

pub fn render_augmentation_prompt(question: &str, solution: &str, bug_report: Option<&str>) -> String {
    fill(
        templates::AUGMENTATION,
        &[
            ("question_statement", question),
            ("solution", solution),
            ("bugs_report", bug_report.unwrap_or("")),
        ],
    )
}

/// Review prompt for one of the two specialized reviewers. The solution must
/// satisfy the refined-solution grammar, since both instructions walk its steps.
pub fn render_review_prompt(question: &str, solution_text: &str, kind: ReviewKind) -> Result<String, FormatError> {
    solution::parse_refined_solution(solution_text)?;
    Ok(render_review_prompt_unchecked(question, solution_text, kind))
}

fn render_review_prompt_unchecked(question: &str, solution_text: &str, kind: ReviewKind) -> String {
    let instruction = match kind {
        ReviewKind::Assumption => templates::ASSUMPTION_INSTRUCTION,
        ReviewKind::Derivation => templates::DERIVATION_INSTRUCTION,
        ReviewKind::Holistic => return render_holistic_review_prompt(question, solution_text),
    };
    fill(
        templates::REVIEWER,
        &[
            ("problem_statement", question),
            ("solution", solution_text),
            ("instruction", instruction),
        ],
    )
}

pub fn render_holistic_review_prompt(question: &str, solution_text: &str) -> String {
    fill(
        templates::HOLISTIC_REVIEWER,
        &[("question_statement", question), ("solution", solution_text)],
    )
}

pub fn render_generic_refine_prompt(question: &str, solution_text: &str, feedback: &str) -> String {
    fill(
        templates::GENERIC_REFINE,
        &[
            ("question_statement", question),
            ("solution", solution_text),
            ("feedback", feedback),
        ],
    )
}

pub fn render_summarization_prompt(review: &str) -> String {
    fill(templates::SUMMARIZATION, &[("review", review)])
}

/// Issues gathered from the two reviews of one iteration. `None` marks a
/// side that found nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReport {
    pub assumption: Option<String>,
    pub derivation: Option<String>,
}

impl BugReport {
    pub fn render(&self) -> String {
        fill(
            templates::ISSUES_REPORT,
            &[
                ("issues_about_assumption", self.assumption.as_deref().unwrap_or(NO_ISSUES)),
                ("issues_about_derivation", self.derivation.as_deref().unwrap_or(NO_ISSUES)),
            ],
        )
    }

    /// Report fed back when the augmenter's output broke the grammar.
    pub fn for_format_failure(error: &FormatError) -> Self {
        let listing = error
            .errors()
            .map(|v| format!("* {v}"))
            .collect::<Vec<_>>()
            .join("\n");
        Self {
            assumption: Some(format!(
                "The refined solution does not follow the required format:\n{listing}"
            )),
            derivation: Some(NOT_REVIEWED.to_string()),
        }
    }
}

/// Model settings for the agents. Reviewers and the summarizer default to
/// greedy decoding; augmentation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub model: String,
    pub augmentation_temperature: f64,
    pub review_temperature: f64,
    pub summarization_temperature: f64,
    pub max_tokens: Option<u32>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            augmentation_temperature: 0.7,
            review_temperature: 0.0,
            summarization_temperature: 0.0,
            max_tokens: None,
        }
    }
}

/// One reviewer call and what came of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub kind: ReviewKind,
    pub prompt: String,
    pub reply: String,
    /// `None` when the reply had no verdict line; the loop counts it as wrong.
    pub verdict: Option<Verdict>,
    /// Summarized issues, filled in when the review was negative.
    pub issues: Option<String>,
}

impl ReviewRecord {
    pub fn passed(&self) -> bool {
        self.verdict == Some(Verdict::Correct)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("both reviews passed, there is nothing to report")]
    NothingToReport,
}

/// The model-backed agents of one pair, bound to a gateway.
pub struct Agents<'a> {
    gateway: &'a dyn Gateway,
    config: &'a AgentConfig,
    scope: &'a str,
}

impl<'a> Agents<'a> {
    pub fn new(gateway: &'a dyn Gateway, config: &'a AgentConfig, scope: &'a str) -> Self {
        Self {
            gateway,
            config,
            scope,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        self.config
    }

    fn request(&self, tag: &str, messages: Vec<ChatMessage>, temperature: f64) -> CompletionRequest {
        CompletionRequest {
            model: self.config.model.clone(),
            messages,
            temperature,
            max_tokens: self.config.max_tokens,
            seed: None,
            tag: tag.to_string(),
            scope: self.scope.to_string(),
        }
    }

    pub async fn call(&self, tag: &str, messages: Vec<ChatMessage>, temperature: f64) -> Result<String, GatewayError> {
        let req = self.request(tag, messages, temperature);
        Ok(self.gateway.complete(&req).await?.content)
    }

    /// Runs the augmenter on a conversation whose last message is the prompt.
    pub async fn augment(&self, messages: Vec<ChatMessage>) -> Result<String, GatewayError> {
        self.call(tags::AUGMENTATION, messages, self.config.augmentation_temperature)
            .await
    }

    pub async fn refine_generic(&self, prompt: String) -> Result<String, GatewayError> {
        self.call(
            tags::REFINE,
            vec![ChatMessage::user(prompt)],
            self.config.augmentation_temperature,
        )
        .await
    }

    pub async fn review(&self, question: &str, solution_text: &str, kind: ReviewKind) -> Result<ReviewRecord, GatewayError> {
        let prompt = render_review_prompt_unchecked(question, solution_text, kind);
        let reply = self
            .call(
                kind.tag(),
                vec![ChatMessage::user(prompt.clone())],
                self.config.review_temperature,
            )
            .await?;
        let verdict = parse_verdict(&reply).ok();
        Ok(ReviewRecord {
            kind,
            prompt,
            reply,
            verdict,
            issues: None,
        })
    }

    /// Both specialized reviews. They are independent, so they run
    /// concurrently; the assumption review is issued first.
    pub async fn review_both(
        &self,
        question: &str,
        solution_text: &str,
    ) -> Result<(ReviewRecord, ReviewRecord), GatewayError> {
        let (assumption, derivation) = tokio::join!(
            self.review(question, solution_text, ReviewKind::Assumption),
            self.review(question, solution_text, ReviewKind::Derivation),
        );
        Ok((assumption?, derivation?))
    }

    pub async fn summarize(&self, review: &str) -> Result<String, GatewayError> {
        self.call(
            tags::SUMMARIZATION,
            vec![ChatMessage::user(render_summarization_prompt(review))],
            self.config.summarization_temperature,
        )
        .await
    }

    /// Summarizes every failed review, assumption side first, and fills the
    /// issues template. Records gain their `issues` text.
    pub async fn compose_bug_report(&self, reviews: &mut [ReviewRecord]) -> Result<BugReport, AgentError> {
        if reviews.iter().all(ReviewRecord::passed) {
            return Err(AgentError::NothingToReport);
        }
        let mut report = BugReport::default();
        for review in reviews.iter_mut().filter(|r| !r.passed()) {
            let issues = self.summarize(&review.reply).await?;
            review.issues = Some(issues.clone());
            match review.kind {
                ReviewKind::Derivation => report.derivation = Some(issues),
                ReviewKind::Assumption | ReviewKind::Holistic => report.assumption = Some(issues),
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnGateway, ReplayGateway, ReplayScript};

    const APPLE: &str = include_str!("../fixtures/apple_refined.md");

    #[test]
    fn fill_is_single_pass() {
        let t = "a {x} b {y} \\text{net} {z}";
        assert_eq!(fill(t, &[("x", "{y}"), ("y", "2")]), "a {y} b 2 \\text{net} {z}");
        assert_eq!(fill("{x", &[("x", "1")]), "{x");
        assert_eq!(fill("{}{x}}", &[("x", "1")]), "{}1}");
    }

    #[test]
    fn templates_keep_foreign_braces() {
        let p = render_augmentation_prompt("Q?", "S.", None);
        assert!(p.contains("\\begin{align}"));
        assert!(p.contains("F_{\\text{net}}"));
        assert!(p.ends_with("# Problem Statement\nQ?\n\n# Solution\nS.\n\n# Bugs Report\n\n\n # Refined Solution"));
        assert!(!p.contains("{question_statement}"));
    }

    #[test]
    fn each_template_names_its_placeholders() {
        let cases: &[(&str, &[&str])] = &[
            (templates::AUGMENTATION, &["question_statement", "solution", "bugs_report"]),
            (templates::REVIEWER, &["problem_statement", "solution", "instruction"]),
            (templates::SUMMARIZATION, &["review"]),
            (templates::ISSUES_REPORT, &["issues_about_assumption", "issues_about_derivation"]),
            (templates::GENERIC_REFINE, &["question_statement", "solution", "feedback"]),
            (templates::HOLISTIC_REVIEWER, &["question_statement", "solution"]),
        ];
        for (template, names) in cases {
            for name in *names {
                assert_eq!(template.matches(&format!("{{{name}}}")).count(), 1, "{name}");
            }
        }
    }

    #[test]
    fn review_prompt_requires_grammar() {
        let p = render_review_prompt("Q", APPLE, ReviewKind::Derivation).unwrap();
        assert!(p.contains(templates::DERIVATION_INSTRUCTION));
        assert!(p.contains("# Problem Statement\nQ\n"));
        assert!(render_review_prompt("Q", "just prose", ReviewKind::Assumption).is_err());
    }

    #[test]
    fn verdict_line_variants() {
        assert_eq!(parse_verdict("blah\nCorrect"), Ok(Verdict::Correct));
        assert_eq!(parse_verdict("blah\n**Wrong**\n\n"), Ok(Verdict::Wrong));
        assert_eq!(parse_verdict("x\n  Correct.  "), Ok(Verdict::Correct));
        assert_eq!(parse_verdict("x\n`Wrong`"), Ok(Verdict::Wrong));
        assert!(parse_verdict("x\ncorrect").is_err());
        assert!(parse_verdict("x\nThe answer is Correct").is_err());
        assert!(parse_verdict("").is_err());
        assert_eq!(parse_verdict(templates::DERIVATION_INSTRUCTION), Ok(Verdict::Wrong));
    }

    #[test]
    fn bug_report_fills_both_slots() {
        let r = BugReport {
            assumption: None,
            derivation: Some("* bad algebra".into()),
        };
        assert_eq!(
            r.render(),
            "# Issues found in solution\n## judge assumption\nNo issues found.\n## judge derivation\n* bad algebra"
        );
    }

    #[tokio::test]
    async fn compose_summarizes_only_failed_sides() {
        let gw = FnGateway(|r: &CompletionRequest| {
            assert_eq!(r.tag, tags::SUMMARIZATION);
            Ok(format!("summary of {}", r.prompt().len()))
        });
        let cfg = AgentConfig::default();
        let agents = Agents::new(&gw, &cfg, "p");
        let rec = |kind, verdict| ReviewRecord {
            kind,
            prompt: String::new(),
            reply: "r".into(),
            verdict,
            issues: None,
        };
        let mut reviews = vec![
            rec(ReviewKind::Assumption, Some(Verdict::Correct)),
            rec(ReviewKind::Derivation, None),
        ];
        let report = agents.compose_bug_report(&mut reviews).await.unwrap();
        assert!(report.assumption.is_none());
        assert!(report.derivation.is_some());
        assert!(reviews[1].issues.is_some());

        let mut ok = vec![rec(ReviewKind::Assumption, Some(Verdict::Correct))];
        assert_eq!(
            agents.compose_bug_report(&mut ok).await,
            Err(AgentError::NothingToReport)
        );
    }

    #[tokio::test]
    async fn review_both_issues_assumption_first() {
        let mut script = ReplayScript::default();
        script.push("p", tags::REVIEW_ASSUMPTION, "fine\nCorrect");
        script.push("p", tags::REVIEW_DERIVATION, "bad\nWrong");
        let gw = ReplayGateway::new(script);
        let cfg = AgentConfig::default();
        let agents = Agents::new(&gw, &cfg, "p");
        let (a, d) = agents.review_both("Q", APPLE).await.unwrap();
        assert_eq!(a.verdict, Some(Verdict::Correct));
        assert_eq!(d.verdict, Some(Verdict::Wrong));
    }
}

//! Comparison filters run over the same corpus, consistency checker and
//! metrics as the main loop.
//!
//! Reasoning filters re-solve the question without looking at the raw
//! answer and accept when the new final answer agrees with it. Review-based
//! filters ask a holistic reviewer about the raw answer, optionally refining
//! it between rounds.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::agents::{
    parse_verdict, render_generic_refine_prompt, render_holistic_review_prompt, AgentConfig,
    Verdict,
};
use crate::consistency::{
    check_equivalence, symbolic_equivalence, text_equivalence, ConsistencyConfig, Equivalence,
    EquivalenceResult, Method,
};
use crate::corpus::Problem;
use crate::gateway::{tags, CompletionRequest, Gateway, GatewayError};
use crate::partition::{Decision, PairDecision, PairProcessor};
use crate::review_loop::LoopStatus;
use crate::solution::{extract_final_expression, extract_raw_final, parse_generic_solution};

const FEW_SHOT: [&str; 2] = [
    include_str!("../data/few_shot/01_projectile.md"),
    include_str!("../data/few_shot/02_spring.md"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Direct,
    ZeroShotCot,
    FewShotCot,
    CotSc,
    ReviewSc,
    SelfReflection,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::Direct,
        BaselineKind::ZeroShotCot,
        BaselineKind::FewShotCot,
        BaselineKind::CotSc,
        BaselineKind::ReviewSc,
        BaselineKind::SelfReflection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Direct => "direct",
            BaselineKind::ZeroShotCot => "zero_shot_cot",
            BaselineKind::FewShotCot => "few_shot_cot",
            BaselineKind::CotSc => "cot_sc",
            BaselineKind::ReviewSc => "review_sc",
            BaselineKind::SelfReflection => "self_reflection",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown baseline `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Sampled paths for the self-consistency vote.
    pub samples_k: u32,
    /// Passing reviews required in a row.
    pub n_consecutive: u32,
    /// Review-and-refine rounds allowed for self-reflection.
    pub max_rounds: u32,
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            samples_k: 5,
            n_consecutive: 3,
            max_rounds: 5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.samples_k == 0 || self.samples_k.is_multiple_of(2) {
            return Err(format!("samples_k must be odd, got {}", self.samples_k));
        }
        if self.n_consecutive == 0 {
            return Err("n_consecutive must be at least 1".into());
        }
        if self.max_rounds == 0 {
            return Err("max_rounds must be at least 1".into());
        }
        Ok(())
    }
}

pub fn render_solve_prompt(kind: BaselineKind, question: &str) -> String {
    let ask = "Solve the following physics problem. End your answer with the final result in LaTeX boxed format, $$\\boxed{...}$$.";
    match kind {
        BaselineKind::FewShotCot => {
            let examples = FEW_SHOT
                .iter()
                .enumerate()
                .map(|(i, ex)| format!("## Example {}\n{}", i + 1, ex.trim()))
                .collect::<Vec<_>>()
                .join("\n\n");
            format!("{ask}\n\n# Worked Examples\n{examples}\n\n# Problem Statement\n{question}\n\n# Solution\n")
        }
        BaselineKind::ZeroShotCot | BaselineKind::CotSc => {
            format!("{ask}\n\n# Problem Statement\n{question}\n\nLet's think step by step.")
        }
        _ => format!("{ask}\n\n# Problem Statement\n{question}"),
    }
}

/// Groups finals by equivalence and returns the index of the unique most
/// common group's first member. Ties, including all-distinct, yield `None`.
pub fn plurality_vote(finals: &[String], cfg: &ConsistencyConfig) -> Option<usize> {
    let same = |a: &str, b: &str| {
        text_equivalence(a, b) == Equivalence::Match
            || symbolic_equivalence(a, b, cfg).verdict == Equivalence::Match
    };
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for (i, f) in finals.iter().enumerate() {
        match groups.iter_mut().find(|(rep, _)| same(&finals[*rep], f)) {
            Some(group) => group.1 += 1,
            None => groups.push((i, 1)),
        }
    }
    let best = groups.iter().map(|g| g.1).max()?;
    let mut winners = groups.iter().filter(|g| g.1 == best);
    let winner = winners.next()?;
    winners.next().is_none().then_some(winner.0)
}

pub struct BaselineRunner {
    pub gateway: Arc<dyn Gateway>,
    pub spec: BaselineSpec,
    pub agents: AgentConfig,
    pub consistency: ConsistencyConfig,
}

#[async_trait]
impl PairProcessor for BaselineRunner {
    async fn process(&self, problem: &Problem) -> PairDecision {
        self.filter(problem).await
    }
}

fn blank_decision(problem: &Problem) -> PairDecision {
    PairDecision {
        pair_id: problem.id.clone(),
        decision: Decision::Rejected,
        internal_coherence: None,
        external_consistency: None,
        final_solution: None,
        final_expression: None,
        raw_final: extract_raw_final(&problem.raw_answer),
        iterations: 0,
        error: None,
    }
}

impl BaselineRunner {
    pub async fn filter(&self, problem: &Problem) -> PairDecision {
        let mut decision = blank_decision(problem);
        let result = match self.spec.kind {
            BaselineKind::ReviewSc => self.review_sc(problem, &mut decision).await,
            BaselineKind::SelfReflection => self.self_reflection(problem, &mut decision).await,
            _ => self.reasoning(problem, &mut decision).await,
        };
        if let Err(e) = result {
            decision.decision = Decision::Errored;
            decision.error = Some(e.to_string());
        }
        decision
    }

    async fn call(&self, scope: &str, tag: &str, prompt: String, temperature: f64, seed: Option<u64>) -> Result<String, GatewayError> {
        let mut req = CompletionRequest::new(scope, tag, self.agents.model.clone(), prompt, temperature);
        req.max_tokens = self.agents.max_tokens;
        req.seed = seed;
        Ok(self.gateway.complete(&req).await?.content)
    }

    async fn consistent(&self, problem: &Problem, candidate: &str) -> Result<EquivalenceResult, GatewayError> {
        match extract_raw_final(&problem.raw_answer) {
            Some(raw) => {
                let judge = Some((self.gateway.as_ref(), problem.id.as_str(), self.agents.model.as_str()));
                check_equivalence(candidate, &raw, &problem.question, &self.consistency, judge).await
            }
            None => Ok(EquivalenceResult {
                verdict: Equivalence::Undecided,
                method: Method::None,
                detail: "raw answer has no final result".into(),
            }),
        }
    }

    async fn reasoning(&self, problem: &Problem, decision: &mut PairDecision) -> Result<(), GatewayError> {
        let prompt = render_solve_prompt(self.spec.kind, &problem.question);
        let samples = if self.spec.kind == BaselineKind::CotSc { self.spec.samples_k } else { 1 };
        let mut answers = Vec::new();
        for i in 0..samples {
            let seed = (self.spec.kind == BaselineKind::CotSc).then_some(i as u64);
            let reply = self
                .call(&problem.id, tags::GENERATE, prompt.clone(), self.agents.augmentation_temperature, seed)
                .await?;
            answers.push(reply);
        }
        decision.iterations = samples;
        let finals: Vec<Option<String>> = answers.iter().map(|a| extract_raw_final(a)).collect();
        let chosen = if self.spec.kind == BaselineKind::CotSc {
            let present: Vec<(usize, String)> = finals
                .iter()
                .enumerate()
                .filter_map(|(i, f)| f.clone().map(|f| (i, f)))
                .collect();
            let texts: Vec<String> = present.iter().map(|(_, f)| f.clone()).collect();
            plurality_vote(&texts, &self.consistency).map(|w| present[w].0)
        } else {
            finals[0].as_ref().map(|_| 0)
        };
        let Some(index) = chosen else {
            decision.external_consistency = Some(EquivalenceResult {
                verdict: Equivalence::Undecided,
                method: Method::None,
                detail: "no unique answer among the generated solutions".into(),
            });
            return Ok(());
        };
        let final_expr = finals[index].clone().expect("chosen answer has a final");
        decision.final_solution = Some(answers[index].clone());
        decision.final_expression = Some(final_expr.clone());
        let consistency = self.consistent(problem, &final_expr).await?;
        if consistency.is_match() {
            decision.decision = Decision::Accepted;
        }
        decision.external_consistency = Some(consistency);
        Ok(())
    }

    /// Up to `n_consecutive` holistic reviews of `solution`, stopping at the
    /// first one that is not a clean `Correct`. Returns the failing reply.
    async fn review_streak(&self, problem: &Problem, solution: &str, calls: &mut u32) -> Result<Option<String>, GatewayError> {
        let prompt = render_holistic_review_prompt(&problem.question, solution);
        for i in 0..self.spec.n_consecutive {
            *calls += 1;
            let reply = self
                .call(&problem.id, tags::REVIEW_HOLISTIC, prompt.clone(), self.agents.review_temperature, Some(i as u64))
                .await?;
            if parse_verdict(&reply) != Ok(Verdict::Correct) {
                return Ok(Some(reply));
            }
        }
        Ok(None)
    }

    async fn review_sc(&self, problem: &Problem, decision: &mut PairDecision) -> Result<(), GatewayError> {
        let mut calls = 0;
        let failure = self.review_streak(problem, &problem.raw_answer, &mut calls).await?;
        decision.iterations = calls;
        let status = if failure.is_none() { LoopStatus::Passed } else { LoopStatus::Failed };
        decision.internal_coherence = Some(status);
        if status == LoopStatus::Passed {
            decision.decision = Decision::Accepted;
        }
        Ok(())
    }

    async fn self_reflection(&self, problem: &Problem, decision: &mut PairDecision) -> Result<(), GatewayError> {
        let mut solution = problem.raw_answer.clone();
        let mut calls = 0;
        let mut status = LoopStatus::Failed;
        for round in 0..self.spec.max_rounds {
            let Some(feedback) = self.review_streak(problem, &solution, &mut calls).await? else {
                status = LoopStatus::Passed;
                break;
            };
            if round + 1 == self.spec.max_rounds {
                break;
            }
            let prompt = render_generic_refine_prompt(&problem.question, &solution, &feedback);
            solution = self
                .call(&problem.id, tags::REFINE, prompt, self.agents.augmentation_temperature, None)
                .await?;
            calls += 1;
        }
        decision.iterations = calls;
        decision.internal_coherence = Some(status);
        let final_expr = parse_generic_solution(&solution)
            .map(|s| extract_final_expression(&s))
            .ok()
            .or_else(|| extract_raw_final(&solution));
        decision.final_solution = Some(solution);
        decision.final_expression = final_expr.clone();
        if status == LoopStatus::Passed {
            let Some(final_expr) = final_expr else {
                return Ok(());
            };
            let consistency = self.consistent(problem, &final_expr).await?;
            if consistency.is_match() {
                decision.decision = Decision::Accepted;
            }
            decision.external_consistency = Some(consistency);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finals(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vote_uses_equivalence_classes() {
        let cfg = ConsistencyConfig::default();
        assert_eq!(plurality_vote(&finals(&["x", "x", "2y", "y+y", "y \\cdot 2"]), &cfg), Some(2));
        assert_eq!(plurality_vote(&finals(&["a", "b", "c", "d", "e"]), &cfg), None);
        assert_eq!(plurality_vote(&finals(&["a", "a", "b", "b", "c"]), &cfg), None);
        assert_eq!(plurality_vote(&[], &cfg), None);
    }

    #[test]
    fn spec_validation() {
        let mut spec = BaselineSpec::new(BaselineKind::CotSc);
        assert!(spec.validate().is_ok());
        spec.samples_k = 4;
        assert!(spec.validate().is_err());
        let mut spec = BaselineSpec::new(BaselineKind::ReviewSc);
        spec.n_consecutive = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn prompts_differ_by_kind() {
        let z = render_solve_prompt(BaselineKind::ZeroShotCot, "Q");
        assert!(z.ends_with("Let's think step by step."));
        let f = render_solve_prompt(BaselineKind::FewShotCot, "Q");
        assert!(f.contains("## Example 2"));
        let d = render_solve_prompt(BaselineKind::Direct, "Q");
        assert!(!d.contains("step by step"));
    }
}

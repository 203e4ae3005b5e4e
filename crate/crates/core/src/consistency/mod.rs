//! External consistency: does the refined solution still reach the raw
//! answer's final result?
//!
//! Checks run as a cascade. Normalized text equality settles the easy cases,
//! numeric sampling of the parsed expressions settles most of the rest, and
//! whatever both leave open goes to an LLM judge. A check that cannot decide
//! reports `Undecided`, which the partitioner treats as a rejection.

pub mod expr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::agents::{parse_verdict, Verdict};
use crate::gateway::{tags, CompletionRequest, Gateway, GatewayError};
use crate::solution::strip_math_markup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equivalence {
    Match,
    Mismatch,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NormalizedText,
    Symbolic,
    Judge,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub verdict: Equivalence,
    pub method: Method,
    pub detail: String,
}

impl EquivalenceResult {
    fn new(verdict: Equivalence, method: Method, detail: impl Into<String>) -> Self {
        Self {
            verdict,
            method,
            detail: detail.into(),
        }
    }

    pub fn is_match(&self) -> bool {
        self.verdict == Equivalence::Match
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Text, then symbolic, then judge.
    #[default]
    Cascade,
    /// Text and symbolic only; never calls a model.
    Offline,
    /// Judge only.
    JudgeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub mode: ConsistencyMode,
    /// Judge model; the agent model is used when unset.
    pub judge_model: Option<String>,
    pub judge_temperature: f64,
    pub seed: u64,
    pub min_points: usize,
    pub max_draws: usize,
    pub rtol: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            mode: ConsistencyMode::Cascade,
            judge_model: None,
            judge_temperature: 0.0,
            seed: 0x10ca,
            min_points: 8,
            max_draws: 256,
            rtol: 1e-8,
        }
    }
}

/// Collapses the notational noise that does not change a value.
pub fn normalize_text(expr: &str) -> String {
    let mut s = strip_math_markup(expr);
    for (from, to) in [
        ("\\dfrac", "\\frac"),
        ("\\tfrac", "\\frac"),
        ("\\left", ""),
        ("\\right", ""),
        ("\\,", ""),
        ("\\;", ""),
        ("\\:", ""),
        ("\\!", ""),
        ("\\cdot", "*"),
        ("\\times", "*"),
    ] {
        s = s.replace(from, to);
    }
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Text after the last `=` that is not nested in a group.
pub fn right_hand_side(expr: &str) -> &str {
    let mut depth = 0i32;
    let mut cut = None;
    let mut prev = '\0';
    for (i, c) in expr.char_indices() {
        match c {
            '{' | '(' | '[' if prev != '\\' => depth += 1,
            '}' | ')' | ']' if prev != '\\' => depth -= 1,
            '=' if depth == 0 => cut = Some(i),
            _ => {}
        }
        prev = c;
    }
    match cut {
        Some(i) => expr[i + 1..].trim(),
        None => expr.trim(),
    }
}

pub fn text_equivalence(candidate: &str, reference: &str) -> Equivalence {
    let (a, b) = (strip_math_markup(candidate), strip_math_markup(reference));
    let (na, nb) = (normalize_text(&a), normalize_text(&b));
    if !na.is_empty()
        && (na == nb || normalize_text(right_hand_side(&a)) == normalize_text(right_hand_side(&b)))
    {
        Equivalence::Match
    } else {
        Equivalence::Undecided
    }
}

fn close(x: f64, y: f64, rtol: f64) -> bool {
    x == y || (x - y).abs() <= rtol * x.abs().max(y.abs())
}

/// Compares the right-hand sides numerically at seeded random points, every
/// symbol drawn from [0.1, 10]. Points where either side is not finite are
/// redrawn; too few finite points leave the question open.
pub fn symbolic_equivalence(candidate: &str, reference: &str, cfg: &ConsistencyConfig) -> EquivalenceResult {
    let (a, b) = (strip_math_markup(candidate), strip_math_markup(reference));
    let parsed = expr::parse(right_hand_side(&a)).and_then(|ea| Ok((ea, expr::parse(right_hand_side(&b))?)));
    let (ea, eb) = match parsed {
        Ok(pair) => pair,
        Err(e) => return EquivalenceResult::new(Equivalence::Undecided, Method::Symbolic, e.to_string()),
    };
    let mut vars = ea.variables();
    vars.extend(eb.variables());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = 0;
    for _ in 0..cfg.max_draws {
        let env: BTreeMap<String, f64> = vars
            .iter()
            .map(|v| (v.clone(), rng.gen_range(0.1..=10.0)))
            .collect();
        let (x, y) = (ea.eval(&env), eb.eval(&env));
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        if !close(x, y, cfg.rtol) {
            return EquivalenceResult::new(
                Equivalence::Mismatch,
                Method::Symbolic,
                format!("values differ at {env:?}: {x} vs {y}"),
            );
        }
        points += 1;
        if points >= cfg.min_points {
            return EquivalenceResult::new(
                Equivalence::Match,
                Method::Symbolic,
                format!("agree at {points} sampled points"),
            );
        }
    }
    EquivalenceResult::new(
        Equivalence::Undecided,
        Method::Symbolic,
        format!("only {points} finite sample points"),
    )
}

pub fn render_judge_prompt(question: &str, candidate: &str, reference: &str) -> String {
    format!(
        "You compare two final answers to the same physics problem and decide whether they are \
mathematically equivalent. Differences in notation, ordering or algebraic form do not matter; \
any difference in value, sign, factor or dependence on a variable does.\n\n\
# Problem Statement\n{question}\n\n\
# Answer A\n{candidate}\n\n\
# Answer B\n{reference}\n\n\
Explain briefly, then in the last line write only 'Correct' if the two answers are equivalent, \
or 'Wrong' if they are not."
    )
}

/// Runs the configured checks on a candidate final expression against the
/// reference one. `gateway` is needed only when the judge is reached.
pub async fn check_equivalence(
    candidate: &str,
    reference: &str,
    question: &str,
    cfg: &ConsistencyConfig,
    judge: Option<(&dyn Gateway, &str, &str)>,
) -> Result<EquivalenceResult, GatewayError> {
    if cfg.mode != ConsistencyMode::JudgeOnly {
        if text_equivalence(candidate, reference) == Equivalence::Match {
            return Ok(EquivalenceResult::new(
                Equivalence::Match,
                Method::NormalizedText,
                "identical after normalization",
            ));
        }
        let symbolic = symbolic_equivalence(candidate, reference, cfg);
        if symbolic.verdict != Equivalence::Undecided || cfg.mode == ConsistencyMode::Offline {
            return Ok(symbolic);
        }
    }
    let Some((gateway, scope, default_model)) = judge else {
        return Ok(EquivalenceResult::new(
            Equivalence::Undecided,
            Method::None,
            "no judge available",
        ));
    };
    let model = cfg.judge_model.as_deref().unwrap_or(default_model);
    let req = CompletionRequest::new(
        scope,
        tags::JUDGE,
        model,
        render_judge_prompt(question, candidate, reference),
        cfg.judge_temperature,
    );
    let reply = gateway.complete(&req).await?.content;
    Ok(match parse_verdict(&reply) {
        Ok(Verdict::Correct) => EquivalenceResult::new(Equivalence::Match, Method::Judge, reply),
        Ok(Verdict::Wrong) => EquivalenceResult::new(Equivalence::Mismatch, Method::Judge, reply),
        Err(_) => EquivalenceResult::new(Equivalence::Undecided, Method::Judge, reply),
    })
}

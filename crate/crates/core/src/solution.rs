//! Parser and renderer for the refined-solution grammar.
//!
//! A refined solution is a markdown document that begins with `# Refined Solution`,
//! continues with `### Problem Statement Explanation`, a run of `### Step N`
//! sections and closes with `### Final Answer`. Inside a step, every principle is
//! a display whose whole body is `\boxed{...}` and derivations live in `align`
//! environments. Displays may be fenced with `$$`, `\[ \]`, or be a bare
//! `\begin{align}` block; rendering always emits `$$`.
//!
//! Parsing is total: it never stops at the first problem and reports every
//! breached rule as a [`FormatViolation`].

use serde::{Deserialize, Serialize};
use std::fmt;

pub const START_MARKER: &str = "# Refined Solution";
pub const EXPLANATION_TITLE: &str = "Problem Statement Explanation";
pub const FINAL_TITLE: &str = "Final Answer";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredSolution {
    pub explanation: String,
    pub steps: Vec<SolutionStep>,
    pub final_answer: FinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionStep {
    pub index: u32,
    pub title: Option<String>,
    /// Bodies of the boxed displays, in source order.
    pub principles: Vec<String>,
    /// Every derivation display of the step, newline separated.
    pub derivation: String,
    pub narration: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub body: String,
    /// Last boxed or align-enclosed expression of the section, markup intact.
    pub expression: String,
}

/// The published formatting rules, numbered as in the augmentation prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatRule {
    StartMarker,
    Sectioning,
    FirstSection,
    StepSections,
    StepContent,
    FinalSection,
    /// Reviewer replies must end with a bare `Correct` or `Wrong` line.
    VerdictLine,
}

impl FormatRule {
    pub fn number(self) -> Option<u8> {
        match self {
            FormatRule::StartMarker => Some(1),
            FormatRule::Sectioning => Some(2),
            FormatRule::FirstSection => Some(3),
            FormatRule::StepSections => Some(4),
            FormatRule::StepContent => Some(5),
            FormatRule::FinalSection => Some(6),
            FormatRule::VerdictLine => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            FormatRule::StartMarker => "start marker",
            FormatRule::Sectioning => "sectioning",
            FormatRule::FirstSection => "first section",
            FormatRule::StepSections => "step sections",
            FormatRule::StepContent => "step content",
            FormatRule::FinalSection => "final section",
            FormatRule::VerdictLine => "verdict line",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatViolation {
    pub rule: FormatRule,
    pub severity: Severity,
    pub message: String,
    /// 1-based line number in the parsed text.
    pub line: usize,
}

impl FormatViolation {
    fn error(rule: FormatRule, line: usize, message: impl Into<String>) -> Self {
        Self {
            rule,
            severity: Severity::Error,
            message: message.into(),
            line,
        }
    }

    fn warning(rule: FormatRule, line: usize, message: impl Into<String>) -> Self {
        Self {
            rule,
            severity: Severity::Warning,
            message: message.into(),
            line,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for FormatViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rule.number() {
            Some(n) => write!(f, "rule {n} ({})", self.rule.label())?,
            None => write!(f, "{}", self.rule.label())?,
        }
        if self.severity == Severity::Warning {
            write!(f, " [warning]")?;
        }
        write!(f, ", line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("refined solution breaks {} formatting rule(s): {}", error_count(.violations), summary(.violations))]
pub struct FormatError {
    /// Every violation found, warnings included.
    pub violations: Vec<FormatViolation>,
}

fn error_count(violations: &[FormatViolation]) -> usize {
    violations.iter().filter(|v| v.is_error()).count()
}

fn summary(violations: &[FormatViolation]) -> String {
    violations
        .iter()
        .filter(|v| v.is_error())
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl FormatError {
    pub fn errors(&self) -> impl Iterator<Item = &FormatViolation> {
        self.violations.iter().filter(|v| v.is_error())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("cannot render solution: {0}")]
    Invariant(String),
}

/// Full diagnostics for one text: the solution when no error-level rule broke.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub solution: Option<StructuredSolution>,
    pub violations: Vec<FormatViolation>,
}

pub fn parse_refined_solution(text: &str) -> Result<StructuredSolution, FormatError> {
    let analysis = analyze(text);
    match analysis.solution {
        Some(solution) => Ok(solution),
        None => Err(FormatError {
            violations: analysis.violations,
        }),
    }
}

pub fn analyze(text: &str) -> Analysis {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let mut violations = Vec::new();

    let marker_at = lines.iter().position(|(_, l)| l.trim() == START_MARKER);
    match lines.first() {
        Some((_, first)) if first.trim_end() == START_MARKER => {}
        _ => violations.push(FormatViolation::error(
            FormatRule::StartMarker,
            1,
            format!("output must begin exactly with the line `{START_MARKER}`"),
        )),
    }
    let body = match marker_at {
        Some(i) => &lines[i + 1..],
        None => &lines[..],
    };

    let (preamble, sections) = split_sections(body, &mut violations);
    if preamble.iter().any(|(_, l)| !l.trim().is_empty()) {
        let line = preamble
            .iter()
            .find(|(_, l)| !l.trim().is_empty())
            .map_or(1, |(n, _)| *n);
        violations.push(FormatViolation::error(
            FormatRule::Sectioning,
            line,
            "content appears outside any `###` section",
        ));
    }

    if sections.is_empty() {
        let line = lines.len().max(1);
        violations.push(FormatViolation::error(
            FormatRule::Sectioning,
            line,
            "no `###` sections found",
        ));
        violations.push(FormatViolation::error(
            FormatRule::FirstSection,
            line,
            format!("missing `### {EXPLANATION_TITLE}` section"),
        ));
        violations.push(FormatViolation::error(
            FormatRule::FinalSection,
            line,
            format!("missing `### {FINAL_TITLE}` section"),
        ));
        return Analysis {
            solution: None,
            violations,
        };
    }

    let kinds: Vec<SectionKind> = sections.iter().map(|s| classify_title(s.title)).collect();
    let last = sections.len() - 1;

    if kinds[0] != SectionKind::Explanation {
        violations.push(FormatViolation::error(
            FormatRule::FirstSection,
            sections[0].line,
            format!(
                "first section must be `### {EXPLANATION_TITLE}`, found `### {}`",
                sections[0].title
            ),
        ));
    }
    if kinds[last] != SectionKind::Final {
        violations.push(FormatViolation::error(
            FormatRule::FinalSection,
            sections[last].line,
            format!("last section must be `### {FINAL_TITLE}`"),
        ));
    }

    let mut expected_step = 1u32;
    let mut explanation = None;
    let mut final_answer = None;
    let mut steps = Vec::new();
    for (pos, (section, kind)) in sections.iter().zip(&kinds).enumerate() {
        match kind {
            SectionKind::Explanation => {
                if pos != 0 {
                    violations.push(FormatViolation::error(
                        FormatRule::FirstSection,
                        section.line,
                        "the explanation section must appear once, as the first section",
                    ));
                } else {
                    let text = join_trimmed(&section.lines);
                    if text.is_empty() {
                        violations.push(FormatViolation::error(
                            FormatRule::FirstSection,
                            section.line,
                            "the explanation section is empty",
                        ));
                    }
                    explanation = Some(text);
                }
            }
            SectionKind::Final => {
                if pos != last {
                    violations.push(FormatViolation::error(
                        FormatRule::FinalSection,
                        section.line,
                        format!("`### {FINAL_TITLE}` must be the very last section"),
                    ));
                } else {
                    final_answer = parse_final(section, &mut violations);
                }
            }
            SectionKind::Step { number, title } => {
                if *number != expected_step {
                    violations.push(FormatViolation::error(
                        FormatRule::StepSections,
                        section.line,
                        format!("expected `### Step {expected_step}`, found `### Step {number}`"),
                    ));
                }
                expected_step = number.saturating_add(1);
                steps.push(parse_step(*number, title.clone(), section, &mut violations));
            }
            SectionKind::Unknown => violations.push(FormatViolation::error(
                FormatRule::StepSections,
                section.line,
                format!(
                    "section `### {}` is neither a step nor the final answer",
                    section.title
                ),
            )),
        }
    }

    if violations.iter().any(FormatViolation::is_error) {
        return Analysis {
            solution: None,
            violations,
        };
    }
    let solution = match (explanation, final_answer) {
        (Some(explanation), Some(final_answer)) => Some(StructuredSolution {
            explanation,
            steps,
            final_answer,
        }),
        _ => None,
    };
    Analysis {
        solution,
        violations,
    }
}

/// Lenient parse used by the generic-refine ablation, which only demands a
/// `### Final Answer` section with a boxed result.
pub fn parse_generic_solution(text: &str) -> Result<StructuredSolution, FormatError> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let final_heading = lines.iter().rposition(|(_, l)| {
        heading_level(l).is_some_and(|(level, title)| {
            level == 3 && classify_title(title) == SectionKind::Final
        })
    });
    let (before, after) = match final_heading {
        Some(i) => (&lines[..i], &lines[i + 1..]),
        None => (&lines[..], &lines[lines.len()..]),
    };
    let mut expression = last_expression(&lex(after));
    if expression.is_none() {
        expression = last_expression(&lex(&lines));
    }
    match expression {
        Some(expression) => Ok(StructuredSolution {
            explanation: join_trimmed(before),
            steps: Vec::new(),
            final_answer: FinalAnswer {
                body: join_trimmed(if after.is_empty() { &lines } else { after }),
                expression,
            },
        }),
        None => Err(FormatError {
            violations: vec![FormatViolation::error(
                FormatRule::FinalSection,
                lines.len().max(1),
                "no boxed or align-enclosed final expression found",
            )],
        }),
    }
}

pub fn render_solution(sol: &StructuredSolution) -> Result<String, RenderError> {
    check_renderable(sol)?;
    let mut out = String::new();
    out.push_str(START_MARKER);
    out.push('\n');
    out.push_str("### ");
    out.push_str(EXPLANATION_TITLE);
    out.push('\n');
    out.push_str(&sol.explanation);
    out.push_str("\n\n");
    for step in &sol.steps {
        match &step.title {
            Some(title) => out.push_str(&format!("### Step {}: {}\n", step.index, title)),
            None => out.push_str(&format!("### Step {}\n", step.index)),
        }
        if !step.narration.is_empty() {
            out.push_str(&step.narration);
            out.push_str("\n\n");
        }
        for principle in &step.principles {
            out.push_str("$$\n\\boxed{");
            out.push_str(principle);
            out.push_str("}\n$$\n");
        }
        if !step.derivation.is_empty() {
            out.push_str("$$\n");
            out.push_str(&step.derivation);
            out.push_str("\n$$\n");
        }
        out.push('\n');
    }
    out.push_str("### ");
    out.push_str(FINAL_TITLE);
    out.push('\n');
    out.push_str(&sol.final_answer.body);
    out.push('\n');
    Ok(out)
}

fn check_renderable(sol: &StructuredSolution) -> Result<(), RenderError> {
    let bad = |msg: String| Err(RenderError::Invariant(msg));
    if sol.explanation.trim().is_empty() {
        return bad("explanation is empty".into());
    }
    if sol.final_answer.expression.trim().is_empty() {
        return bad("final answer has no expression".into());
    }
    for field in [&sol.explanation, &sol.final_answer.body] {
        if contains_heading(field) {
            return bad("free text contains a markdown heading line".into());
        }
    }
    for (pos, step) in sol.steps.iter().enumerate() {
        if step.index as usize != pos + 1 {
            return bad(format!(
                "step at position {} is numbered {}",
                pos + 1,
                step.index
            ));
        }
        if step.principles.is_empty() && step.narration.trim().is_empty() {
            return bad(format!("step {} has neither principles nor narration", step.index));
        }
        if let Some(p) = step
            .principles
            .iter()
            .find(|p| p.trim().is_empty() || p.contains('\n') || !braces_balanced(p))
        {
            return bad(format!(
                "step {} has a principle that is not a single balanced line: {p:?}",
                step.index
            ));
        }
        if contains_heading(&step.narration) || contains_heading(&step.derivation) {
            return bad(format!("step {} contains a markdown heading line", step.index));
        }
        if step.title.as_deref().is_some_and(|t| t.contains('\n')) {
            return bad(format!("step {} title spans lines", step.index));
        }
    }
    Ok(())
}

/// The final expression with math delimiters and boxed/align markup stripped.
pub fn extract_final_expression(sol: &StructuredSolution) -> String {
    strip_math_markup(&sol.final_answer.expression)
}

/// Best-effort final result of an unstructured answer: the last `\boxed{}`
/// when present, otherwise the last display block, otherwise the last line.
pub fn extract_raw_final(text: &str) -> Option<String> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let blocks = lex(&lines);
    if text.contains("\\boxed{") {
        if let Some(boxed) = last_boxed(text) {
            let s = strip_math_markup(boxed);
            if !s.is_empty() {
                return Some(s);
            }
        }
    }
    let last_display = blocks.iter().rev().find_map(|b| match b {
        Block::Display(d) if !d.content.trim().is_empty() => Some(d.content.as_str()),
        _ => None,
    });
    if let Some(content) = last_display {
        return Some(strip_math_markup(content));
    }
    text.lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(strip_math_markup)
}

/// Number of display-math blocks in a text; the step count implied by an
/// unstructured answer that shows one display per step.
pub fn count_display_blocks(text: &str) -> usize {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    lex(&lines)
        .iter()
        .filter(|b| matches!(b, Block::Display(_)))
        .count()
}

/// Strips display delimiters, `\boxed{}`, align scaffolding, labels and tags,
/// and collapses whitespace.
pub fn strip_math_markup(expr: &str) -> String {
    let mut s = expr.trim().to_string();
    for (open, close) in [("$$", "$$"), ("\\[", "\\]"), ("\\(", "\\)"), ("$", "$")] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            s = inner.trim().to_string();
        }
    }
    for cmd in ["\\label", "\\tag", "\\tag*"] {
        s = remove_command_with_arg(&s, cmd);
    }
    for env in ["align*", "align", "aligned", "equation*", "equation"] {
        s = s.replace(&format!("\\begin{{{env}}}"), " ");
        s = s.replace(&format!("\\end{{{env}}}"), " ");
    }
    s = s.replace("\\nonumber", " ").replace("\\notag", " ");
    s = s.replace("\\\\", " ").replace("\\ ", " ").replace('&', " ");
    s = unwrap_command(&s, "\\boxed");
    let mut collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    while collapsed.ends_with([',', '.', ';']) {
        collapsed.pop();
        collapsed.truncate(collapsed.trim_end().len());
    }
    collapsed
}

/// Replaces every `cmd{X}` with `X`.
pub(crate) fn unwrap_command(s: &str, cmd: &str) -> String {
    let pattern = format!("{cmd}{{");
    let mut out = s.to_string();
    while let Some(start) = out.find(&pattern) {
        let open = start + pattern.len() - 1;
        match matching_brace(&out, open) {
            Some(close) => {
                let inner = out[open + 1..close].to_string();
                out.replace_range(start..=close, &inner);
            }
            None => {
                out.replace_range(start..open + 1, "");
            }
        }
    }
    out
}

fn remove_command_with_arg(s: &str, cmd: &str) -> String {
    let pattern = format!("{cmd}{{");
    let mut out = s.to_string();
    while let Some(start) = out.find(&pattern) {
        let open = start + pattern.len() - 1;
        let end = matching_brace(&out, open).map_or(out.len(), |c| c + 1);
        out.replace_range(start..end, " ");
    }
    out
}

/// Byte index of the `}` matching the `{` at `open`; `\{` and `\}` are skipped.
pub(crate) fn matching_brace(s: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut escaped = false;
    for (i, c) in s[open..].char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' => escaped = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(open + i);
                }
            }
            _ => {}
        }
    }
    None
}

fn braces_balanced(s: &str) -> bool {
    let mut depth = 0i64;
    let mut escaped = false;
    for c in s.chars() {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' => escaped = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

/// The full text of the last `\boxed{...}` in `s`.
fn last_boxed(s: &str) -> Option<&str> {
    let start = s.rfind("\\boxed{")?;
    let open = start + "\\boxed".len();
    let close = matching_brace(s, open)?;
    Some(&s[start..=close])
}

/// Inner text when `s` is exactly one `\boxed{...}`.
fn whole_boxed(s: &str) -> Option<&str> {
    let rest = s.strip_prefix("\\boxed")?;
    if !rest.starts_with('{') {
        return None;
    }
    let open = "\\boxed".len();
    let close = matching_brace(s, open)?;
    (close == s.len() - 1).then(|| &s[open + 1..close])
}

fn contains_heading(text: &str) -> bool {
    text.lines().any(|l| heading_level(l).is_some())
}

fn join_trimmed(lines: &[(usize, &str)]) -> String {
    lines
        .iter()
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

// ---------------------------------------------------------------------------
// Sections

struct RawSection<'a> {
    title: &'a str,
    line: usize,
    lines: Vec<(usize, &'a str)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SectionKind {
    Explanation,
    Step { number: u32, title: Option<String> },
    Final,
    Unknown,
}

fn heading_level(line: &str) -> Option<(usize, &str)> {
    let t = line.trim_start();
    let level = t.chars().take_while(|&c| c == '#').count();
    if level == 0 {
        return None;
    }
    let rest = &t[level..];
    if rest.is_empty() || rest.starts_with([' ', '\t']) {
        Some((level, rest.trim()))
    } else {
        None
    }
}

fn split_sections<'a>(
    body: &[(usize, &'a str)],
    violations: &mut Vec<FormatViolation>,
) -> (Vec<(usize, &'a str)>, Vec<RawSection<'a>>) {
    let mut preamble = Vec::new();
    let mut sections: Vec<RawSection<'a>> = Vec::new();
    for &(no, line) in body {
        match heading_level(line) {
            Some((3, title)) => sections.push(RawSection {
                title,
                line: no,
                lines: Vec::new(),
            }),
            Some((level, _)) => {
                violations.push(FormatViolation::error(
                    FormatRule::Sectioning,
                    no,
                    format!("only `###` headings may structure the solution, found level {level}"),
                ));
                push_line(&mut sections, &mut preamble, no, line);
            }
            None => push_line(&mut sections, &mut preamble, no, line),
        }
    }
    (preamble, sections)
}

fn push_line<'a>(
    sections: &mut [RawSection<'a>],
    preamble: &mut Vec<(usize, &'a str)>,
    no: usize,
    line: &'a str,
) {
    match sections.last_mut() {
        Some(s) => s.lines.push((no, line)),
        None => preamble.push((no, line)),
    }
}

const STEP_SEPARATORS: [char; 5] = [':', '.', '-', '\u{2013}', '\u{2014}'];

fn classify_title(title: &str) -> SectionKind {
    let t = title.trim();
    let bare = t.trim_end_matches(':').trim_end();
    if bare == EXPLANATION_TITLE {
        return SectionKind::Explanation;
    }
    if bare == FINAL_TITLE {
        return SectionKind::Final;
    }
    let Some(rest) = t.strip_prefix("Step") else {
        return SectionKind::Unknown;
    };
    let spaced = rest.trim_start();
    if spaced.len() == rest.len() {
        return SectionKind::Unknown;
    }
    let digits = spaced.bytes().take_while(u8::is_ascii_digit).count();
    let Ok(number) = spaced[..digits].parse::<u32>() else {
        return SectionKind::Unknown;
    };
    let tail = &spaced[digits..];
    if !(tail.is_empty() || tail.starts_with(char::is_whitespace) || tail.starts_with(STEP_SEPARATORS)) {
        return SectionKind::Unknown;
    }
    let tail = tail.trim_start();
    let tail = tail.strip_prefix(STEP_SEPARATORS).unwrap_or(tail).trim();
    SectionKind::Step {
        number,
        title: (!tail.is_empty()).then(|| tail.to_string()),
    }
}

fn parse_step(
    number: u32,
    title: Option<String>,
    section: &RawSection<'_>,
    violations: &mut Vec<FormatViolation>,
) -> SolutionStep {
    let mut principles = Vec::new();
    let mut derivations: Vec<String> = Vec::new();
    let mut paragraphs: Vec<String> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let flush = |current: &mut Vec<String>, paragraphs: &mut Vec<String>| {
        if !current.is_empty() {
            paragraphs.push(current.join("\n"));
            current.clear();
        }
    };

    for block in lex(&section.lines) {
        match block {
            Block::Blank => flush(&mut current, &mut paragraphs),
            Block::Prose { text, line } => {
                if text.contains("$$") && text.contains("\\boxed") {
                    violations.push(FormatViolation::error(
                        FormatRule::StepContent,
                        line,
                        "a boxed principle must sit on its own line in a `$$\\boxed{}$$` display",
                    ));
                }
                current.push(text.trim_end().to_string());
            }
            Block::Display(d) => {
                if !d.terminated {
                    violations.push(FormatViolation::error(
                        FormatRule::StepContent,
                        d.line,
                        "display math is never closed",
                    ));
                }
                let content = d.content.trim();
                if let Some(inner) = whole_boxed(content) {
                    flush(&mut current, &mut paragraphs);
                    let inner = inner.trim();
                    if inner.contains('\n') {
                        violations.push(FormatViolation::error(
                            FormatRule::StepContent,
                            d.line,
                            "a boxed principle must fit in a single line",
                        ));
                    }
                    if !d.trailing.trim().is_empty() {
                        violations.push(FormatViolation::error(
                            FormatRule::StepContent,
                            d.line,
                            "text follows a boxed principle on the same line",
                        ));
                    }
                    principles.push(inner.to_string());
                } else if content.contains("\\begin{align") {
                    flush(&mut current, &mut paragraphs);
                    if !content.contains("\\label{") && !content.contains("\\tag{") {
                        violations.push(FormatViolation::warning(
                            FormatRule::StepContent,
                            d.line,
                            "derivation carries no \\label{} or \\tag{} for reference",
                        ));
                    }
                    derivations.push(content.to_string());
                } else {
                    violations.push(FormatViolation::warning(
                        FormatRule::StepContent,
                        d.line,
                        "display math outside an align environment is kept as narration",
                    ));
                    current.extend(d.raw.lines().map(|l| l.trim_end().to_string()));
                }
            }
        }
    }
    flush(&mut current, &mut paragraphs);
    let narration = paragraphs.join("\n\n").trim().to_string();

    if principles.is_empty() && narration.is_empty() {
        violations.push(FormatViolation::error(
            FormatRule::StepContent,
            section.line,
            format!("step {number} states neither a principle nor any narration"),
        ));
    }
    SolutionStep {
        index: number,
        title,
        principles,
        derivation: derivations.join("\n"),
        narration,
    }
}

fn parse_final(
    section: &RawSection<'_>,
    violations: &mut Vec<FormatViolation>,
) -> Option<FinalAnswer> {
    let blocks = lex(&section.lines);
    for block in &blocks {
        if let Block::Display(d) = block {
            if !d.terminated {
                violations.push(FormatViolation::error(
                    FormatRule::FinalSection,
                    d.line,
                    "display math is never closed",
                ));
            }
        }
    }
    let has_align = blocks
        .iter()
        .any(|b| matches!(b, Block::Display(d) if d.content.contains("\\begin{align")));
    if !has_align {
        violations.push(FormatViolation::warning(
            FormatRule::FinalSection,
            section.line,
            "final expression is not enclosed in an align environment",
        ));
    }
    match last_expression(&blocks) {
        Some(expression) => Some(FinalAnswer {
            body: join_trimmed(&section.lines),
            expression,
        }),
        None => {
            violations.push(FormatViolation::error(
                FormatRule::FinalSection,
                section.line,
                "the final answer states no boxed or align-enclosed expression",
            ));
            None
        }
    }
}

fn last_expression(blocks: &[Block<'_>]) -> Option<String> {
    let mut found = None;
    for block in blocks {
        let candidate = match block {
            Block::Display(d) if d.terminated => {
                let c = d.content.trim();
                if let Some(inner) = align_inner(c) {
                    Some(last_boxed(inner).unwrap_or(inner).trim().to_string())
                } else {
                    last_boxed(c).map(str::to_string)
                }
            }
            Block::Prose { text, .. } => last_boxed(text).map(str::to_string),
            _ => None,
        };
        if let Some(c) = candidate.filter(|c| !strip_math_markup(c).is_empty()) {
            found = Some(c);
        }
    }
    found
}

/// Body of the last align environment in `s`.
fn align_inner(s: &str) -> Option<&str> {
    let begin = s.rfind("\\begin{align")?;
    let after = &s[begin..];
    let name_end = after.find('}')?;
    let env = &after["\\begin{".len()..name_end];
    let body_start = begin + name_end + 1;
    let end_marker = format!("\\end{{{env}}}");
    let body_end = s[body_start..]
        .find(&end_marker)
        .map_or(s.len(), |i| body_start + i);
    Some(&s[body_start..body_end])
}

// ---------------------------------------------------------------------------
// Line lexer

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fence {
    Dollars,
    Bracket,
    BareAlign,
}

#[derive(Debug)]
struct Display {
    #[allow(dead_code)]
    fence: Fence,
    content: String,
    /// Source lines of the whole display, delimiters included.
    raw: String,
    trailing: String,
    line: usize,
    terminated: bool,
}

#[derive(Debug)]
enum Block<'a> {
    Blank,
    Prose { text: &'a str, line: usize },
    Display(Display),
}

fn lex<'a>(lines: &[(usize, &'a str)]) -> Vec<Block<'a>> {
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (no, line) = lines[i];
        let t = line.trim_start();
        if t.trim().is_empty() {
            blocks.push(Block::Blank);
            i += 1;
            continue;
        }
        let opening = if let Some(rest) = t.strip_prefix("$$") {
            Some((Fence::Dollars, rest, "$$".to_string()))
        } else if let Some(rest) = t.strip_prefix("\\[") {
            Some((Fence::Bracket, rest, "\\]".to_string()))
        } else if t.starts_with("\\begin{align") {
            let env_end = t.find('}').unwrap_or(t.len() - 1);
            let env = &t["\\begin{".len()..env_end];
            Some((Fence::BareAlign, t, format!("\\end{{{env}}}")))
        } else {
            None
        };
        let Some((fence, rest, closer)) = opening else {
            blocks.push(Block::Prose { text: line, line: no });
            i += 1;
            continue;
        };

        let mut raw = vec![line];
        let mut content: Vec<&str> = Vec::new();
        let mut trailing = String::new();
        let mut terminated = false;
        // For bare align the begin line itself is part of the content and the
        // closer search starts after the `\begin{...}` token.
        let search_from = if fence == Fence::BareAlign {
            rest.find('}').map_or(rest.len(), |p| p + 1)
        } else {
            0
        };
        if let Some(p) = rest[search_from..].find(&closer) {
            let p = search_from + p;
            terminated = true;
            match fence {
                Fence::BareAlign => {
                    content.push(&rest[..p + closer.len()]);
                    trailing = rest[p + closer.len()..].to_string();
                }
                _ => {
                    content.push(&rest[..p]);
                    trailing = rest[p + closer.len()..].to_string();
                }
            }
            i += 1;
        } else {
            if !rest.trim().is_empty() {
                content.push(rest);
            }
            i += 1;
            while i < lines.len() {
                let (_, l) = lines[i];
                raw.push(l);
                i += 1;
                if let Some(p) = l.find(&closer) {
                    terminated = true;
                    match fence {
                        Fence::BareAlign => {
                            content.push(&l[..p + closer.len()]);
                            trailing = l[p + closer.len()..].to_string();
                        }
                        _ => {
                            content.push(&l[..p]);
                            trailing = l[p + closer.len()..].to_string();
                        }
                    }
                    break;
                }
                content.push(l);
            }
        }
        blocks.push(Block::Display(Display {
            fence,
            content: content.join("\n"),
            raw: raw.join("\n"),
            trailing,
            line: no,
            terminated,
        }));
    }
    blocks
}

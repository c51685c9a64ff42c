use crate::types::{DecompositionTrace, Step, MAX_GENERATION_STEPS};

pub const FOLLOW_UP: &str = "Follow up:";
pub const INTERMEDIATE_ANSWER: &str = "Intermediate answer:";
pub const FINAL_ANSWER: &str = "So the final answer is:";
pub const NO_FOLLOW_UP_NEEDED: &str = "Are follow up questions needed here: No.";
pub const FOLLOW_UP_NEEDED: &str = "Are follow up questions needed here: Yes.";
pub const QUESTION: &str = "Question:";

/// One structural line of Self-Ask output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    FollowUp(String),
    IntermediateAnswer(String),
    FinalAnswer(String),
    NoFollowUpNeeded,
    FollowUpNeeded,
    Unparseable,
}

/// Classifies one line. Markers are case-sensitive; only surrounding
/// whitespace is tolerated. A marker with an empty payload is unparseable.
pub fn parse_step(text: &str) -> Segment {
    let t = text.trim();
    if t == NO_FOLLOW_UP_NEEDED {
        return Segment::NoFollowUpNeeded;
    }
    if t == FOLLOW_UP_NEEDED {
        return Segment::FollowUpNeeded;
    }
    let with_payload = |marker: &str| {
        t.strip_prefix(marker)
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::to_string)
    };
    if let Some(p) = with_payload(FOLLOW_UP) {
        Segment::FollowUp(p)
    } else if let Some(p) = with_payload(INTERMEDIATE_ANSWER) {
        Segment::IntermediateAnswer(p)
    } else if let Some(p) = with_payload(FINAL_ANSWER) {
        Segment::FinalAnswer(p)
    } else {
        Segment::Unparseable
    }
}

/// `ContextN: ...` with N a positive decimal number; returns the payload.
pub(crate) fn context_line(line: &str) -> Option<(usize, &str)> {
    let rest = line.trim().strip_prefix("Context")?;
    let colon = rest.find(':')?;
    let n: usize = rest[..colon].parse().ok()?;
    (n > 0).then(|| (n, rest[colon + 1..].trim()))
}

/// Parses a model continuation (optionally preceded by `ContextN:` lines and a
/// `Question:` line) into a trace. Ill-formed output yields a failed trace
/// with a diagnostic instead of an error. Text after the final answer is
/// ignored.
pub fn parse_trace(text: &str) -> DecompositionTrace {
    let mut trace = DecompositionTrace::new("");
    trace.raw_text = text.to_string();
    let mut pending: Option<String> = None;
    let mut in_header = true;

    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if in_header {
            if let Some(q) = t.strip_prefix(QUESTION) {
                trace.question = q.trim().to_string();
                continue;
            }
            if context_line(t).is_some() {
                continue;
            }
        }
        in_header = false;
        match parse_step(t) {
            Segment::NoFollowUpNeeded | Segment::FollowUpNeeded => {
                if !trace.steps.is_empty() || pending.is_some() {
                    trace.fail(format!("decision line after decomposition started: {t}"));
                    return trace;
                }
            }
            Segment::FollowUp(q) => {
                if pending.is_some() {
                    trace.fail("two follow-up questions without an intermediate answer");
                    return trace;
                }
                pending = Some(q);
            }
            Segment::IntermediateAnswer(a) => match pending.take() {
                Some(q) => trace.steps.push(Step::new(q, a)),
                None => {
                    trace.fail("intermediate answer without a follow-up question");
                    return trace;
                }
            },
            Segment::FinalAnswer(a) => {
                if pending.is_some() {
                    trace.fail("final answer while a follow-up question is unanswered");
                } else if trace.steps.len() >= MAX_GENERATION_STEPS {
                    trace.fail(format!(
                        "{} decomposition steps exceed the limit of {}",
                        trace.steps.len(),
                        MAX_GENERATION_STEPS - 1
                    ));
                } else {
                    trace.complete(a);
                }
                return trace;
            }
            Segment::Unparseable => {
                trace.fail(format!("unparseable line: {t}"));
                return trace;
            }
        }
    }
    trace.fail(if pending.is_some() {
        "follow-up question without an intermediate answer"
    } else {
        "no final answer"
    });
    trace
}

/// The Self-Ask lines for a (possibly partial) trace, optionally followed by
/// an unanswered follow-up question.
pub(crate) fn trace_lines(trace: &DecompositionTrace, pending: Option<&str>) -> Vec<String> {
    let mut lines = Vec::new();
    if !trace.steps.is_empty() || pending.is_some() {
        lines.push(FOLLOW_UP_NEEDED.to_string());
    } else if trace.final_answer().is_some() {
        lines.push(NO_FOLLOW_UP_NEEDED.to_string());
    }
    for step in &trace.steps {
        lines.push(format!("{FOLLOW_UP} {}", step.follow_up));
        lines.push(format!("{INTERMEDIATE_ANSWER} {}", step.intermediate_answer));
    }
    if let Some(q) = pending {
        lines.push(format!("{FOLLOW_UP} {q}"));
    } else if let Some(a) = trace.final_answer() {
        lines.push(format!("{FINAL_ANSWER} {a}"));
    }
    lines
}

/// Renders the decomposition part of a trace in Self-Ask format.
pub fn serialize_trace(trace: &DecompositionTrace) -> String {
    trace_lines(trace, None).join("\n")
}

//! Entailment gate: decide whether a retrieval-augmented trace is supported
//! by its evidence or whether to fall back to the no-retrieval trace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EntailmentModel, EntailmentRequest, EntailmentScore};
use crate::types::{ContextBundle, DecompositionTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("cannot gate a failed trace")]
    FailedTrace,
    #[error("no retrieved evidence to use as premise")]
    EmptyPremise,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCheck {
    pub hypothesis: String,
    pub premise: String,
    pub score: EntailmentScore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum BackOffReason {
    /// Some check fell below the threshold.
    NotEntailed,
    /// The retrieval trace never reached a final answer.
    RalmFailed,
    /// The entailment service failed; backing off keeps the run total.
    GateError(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum Verdict {
    Accept,
    BackOff(BackOffReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub checks: Vec<GateCheck>,
    pub threshold: f64,
    #[serde(flatten)]
    pub verdict: Verdict,
    /// Smallest `p_entail` over the checks; absent when nothing was checked.
    pub min_p_entail: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ralm_trace: Option<DecompositionTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_trace: Option<DecompositionTrace>,
}

impl GateDecision {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }

    /// A decision that skipped the checks.
    pub fn back_off(reason: BackOffReason, threshold: f64) -> Self {
        GateDecision {
            checks: Vec::new(),
            threshold,
            verdict: Verdict::BackOff(reason),
            min_p_entail: None,
            ralm_trace: None,
            fallback_trace: None,
        }
    }
}

pub fn build_hypothesis(question: &str, answer: &str) -> String {
    format!("Q: {question} A: {answer}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PremiseScope {
    /// The snippet retrieved at one position of the bundle.
    PerStep(usize),
    All,
}

/// Snippet texts in retrieval order, newline-separated.
pub fn build_premise(contexts: &ContextBundle, scope: PremiseScope) -> Result<String, GateError> {
    let snippets = contexts.snippets();
    if snippets.is_empty() {
        return Err(GateError::EmptyPremise);
    }
    match scope {
        PremiseScope::PerStep(i) => snippets.get(i).map(|s| s.text.clone()).ok_or(GateError::EmptyPremise),
        PremiseScope::All => Ok(snippets.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")),
    }
}

/// One check per (follow-up, intermediate answer) pair plus one for the
/// original question and final answer. Single-hop traces use the single
/// retrieved snippet; decompositions use the whole bundle for every check.
pub fn evaluate(
    trace: &DecompositionTrace,
    contexts: &ContextBundle,
    nli: &dyn EntailmentModel,
    threshold: f64,
) -> Result<GateDecision, GateError> {
    let final_answer = match trace.final_answer() {
        Some(a) if !trace.failed() => a,
        _ => return Err(GateError::FailedTrace),
    };
    let premise = if trace.steps.is_empty() {
        build_premise(contexts, PremiseScope::PerStep(0))?
    } else {
        build_premise(contexts, PremiseScope::All)?
    };
    let hypotheses = trace
        .steps
        .iter()
        .map(|s| build_hypothesis(&s.follow_up, &s.intermediate_answer))
        .chain(std::iter::once(build_hypothesis(&trace.question, final_answer)));

    let mut checks = Vec::new();
    for hypothesis in hypotheses {
        let score = nli.entail(&EntailmentRequest::new(premise.clone(), hypothesis.clone()), threshold)?;
        checks.push(GateCheck {
            hypothesis,
            premise: premise.clone(),
            score,
        });
    }
    let min_p_entail = checks.iter().map(|c| c.score.p_entail).reduce(f64::min);
    let verdict = if checks.iter().all(|c| c.score.p_entail >= threshold) {
        Verdict::Accept
    } else {
        Verdict::BackOff(BackOffReason::NotEntailed)
    };
    Ok(GateDecision {
        checks,
        threshold,
        verdict,
        min_p_entail,
        ralm_trace: None,
        fallback_trace: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Low,
    Medium,
    High,
}

impl Bucket {
    /// Low below 1/3, High above 2/3, Medium otherwise (both ends inclusive).
    pub fn of(p_entail: f64) -> Bucket {
        if p_entail < 1.0 / 3.0 {
            Bucket::Low
        } else if p_entail > 2.0 / 3.0 {
            Bucket::High
        } else {
            Bucket::Medium
        }
    }
}

/// The decision statistic and the with-minus-without retrieval score
/// difference for one question.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketSample {
    pub p_entail: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: Bucket,
    pub count: usize,
    /// Percentage of all samples.
    pub share: f64,
    /// Mean delta in the bucket; 0 when the bucket is empty.
    pub mean_delta: f64,
}

/// Three rows (Low, Medium, High), or none for empty input.
pub fn bucket_entailment(samples: &[BucketSample]) -> Vec<BucketRow> {
    if samples.is_empty() {
        return Vec::new();
    }
    [Bucket::Low, Bucket::Medium, Bucket::High]
        .into_iter()
        .map(|bucket| {
            let deltas: Vec<f64> = samples
                .iter()
                .filter(|s| Bucket::of(s.p_entail) == bucket)
                .map(|s| s.delta)
                .collect();
            let count = deltas.len();
            BucketRow {
                bucket,
                count,
                share: count as f64 * 100.0 / samples.len() as f64,
                mean_delta: if count == 0 {
                    0.0
                } else {
                    deltas.iter().sum::<f64>() / count as f64
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FnEntailment, TableEntailment};
    use crate::types::{EvidenceSnippet, Step, Tier};

    fn bundle(texts: &[&str]) -> ContextBundle {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| EvidenceSnippet {
                query: format!("q{i}"),
                rank: 1,
                title: "T".into(),
                text: t.to_string(),
                tier: Tier::Top1,
                source: "index".into(),
            })
            .collect()
    }

    fn two_hop() -> DecompositionTrace {
        DecompositionTrace::completed(
            "Q0",
            vec![Step::new("Q1", "A1"), Step::new("Q2", "A2")],
            "F",
        )
    }

    fn scored(scores: &[(&str, f64)]) -> TableEntailment {
        let mut t = TableEntailment::new();
        for (h, p) in scores {
            t.insert_hypothesis(h, *p);
        }
        t
    }

    #[test]
    fn hypothesis_template_is_literal() {
        assert_eq!(build_hypothesis("q", "a"), "Q: q A: a");
        assert_eq!(
            build_hypothesis(
                "Who is Colonel Walter Phelps?",
                "Colonel Walter Phelps was an officer in the Union Army throughout the American Civil War."
            ),
            "Q: Who is Colonel Walter Phelps? A: Colonel Walter Phelps was an officer in the Union Army throughout the American Civil War."
        );
        assert_eq!(build_hypothesis("no mark", "x"), "Q: no mark A: x");
    }

    #[test]
    fn premise_construction() {
        assert_eq!(build_premise(&bundle(&["one"]), PremiseScope::All).unwrap(), "one");
        assert_eq!(build_premise(&bundle(&["a", "b", "c"]), PremiseScope::All).unwrap(), "a\nb\nc");
        assert_eq!(build_premise(&bundle(&["a", "b"]), PremiseScope::PerStep(1)).unwrap(), "b");
        assert_eq!(build_premise(&ContextBundle::new(), PremiseScope::All), Err(GateError::EmptyPremise));
    }

    #[test]
    fn all_checks_pass_accepts() {
        let nli = FnEntailment::constant(0.8);
        let d = evaluate(&two_hop(), &bundle(&["a", "b", "c"]), &nli, 0.5).unwrap();
        assert!(d.accepted());
        assert_eq!(d.checks.len(), 3);
        assert!(d.checks.iter().all(|c| c.premise == "a\nb\nc"));
        assert_eq!(d.checks[2].hypothesis, "Q: Q0 A: F");
    }

    #[test]
    fn one_low_check_backs_off() {
        let nli = scored(&[("Q: Q1 A: A1", 0.8), ("Q: Q2 A: A2", 0.3), ("Q: Q0 A: F", 0.9)]);
        let d = evaluate(&two_hop(), &bundle(&["a", "b", "c"]), &nli, 0.5).unwrap();
        assert_eq!(d.verdict, Verdict::BackOff(BackOffReason::NotEntailed));
        assert_eq!(d.min_p_entail, Some(0.3));
    }

    #[test]
    fn single_hop_boundary() {
        let t = DecompositionTrace::completed("q", vec![], "a");
        let at = evaluate(&t, &bundle(&["s"]), &FnEntailment::constant(0.5), 0.5).unwrap();
        assert!(at.accepted());
        assert_eq!(at.checks.len(), 1);
        let below = evaluate(&t, &bundle(&["s"]), &FnEntailment::constant(0.4999), 0.5).unwrap();
        assert!(!below.accepted());
    }

    #[test]
    fn failed_traces_are_not_gated() {
        let t = DecompositionTrace::new("q");
        assert_eq!(
            evaluate(&t, &bundle(&["s"]), &FnEntailment::constant(1.0), 0.5).unwrap_err(),
            GateError::FailedTrace
        );
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(Bucket::of(0.1), Bucket::Low);
        assert_eq!(Bucket::of(0.5), Bucket::Medium);
        assert_eq!(Bucket::of(0.9), Bucket::High);
        assert_eq!(Bucket::of(1.0 / 3.0), Bucket::Medium);
        assert_eq!(Bucket::of(2.0 / 3.0), Bucket::Medium);
        let rows = bucket_entailment(
            &[0.1, 0.5, 0.9].map(|p| BucketSample { p_entail: p, delta: 0.0 }),
        );
        assert!(rows.iter().all(|r| r.count == 1));
    }

    #[test]
    fn single_bucket_table() {
        let rows = bucket_entailment(&[BucketSample { p_entail: 0.9, delta: 1.0 }; 4]);
        assert_eq!(rows[2].share, 100.0);
        assert_eq!(rows[2].mean_delta, 1.0);
        assert_eq!(rows[0].mean_delta, 0.0);
        assert!(bucket_entailment(&[]).is_empty());
    }

    #[test]
    fn decision_serializes_flat_verdict() {
        let d = GateDecision::back_off(BackOffReason::RalmFailed, 0.5);
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains(r#""verdict":"back_off""#), "{json}");
        let back: GateDecision = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }
}

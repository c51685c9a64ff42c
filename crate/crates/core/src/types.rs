//! Domain records shared by every pipeline stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nligate::GateDecision;
use crate::retrieval::NoiseMode;
use crate::selfask::VariantKind;

/// Maximum number of generation steps per question, including the step that
/// produces the final answer.
pub const MAX_GENERATION_STEPS: usize = 5;

/// Benchmarks the harness knows how to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "nq")]
    NaturalQuestions,
    #[serde(rename = "2wikimqa")]
    TwoWikiMultiHop,
    #[serde(rename = "bamboogle")]
    Bamboogle,
    #[serde(rename = "strategyqa")]
    StrategyQa,
    #[serde(rename = "fermi")]
    Fermi,
}

/// How predictions are scored for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    ExactMatch,
    TokenF1,
    OrderOfMagnitude,
}

impl DatasetId {
    pub const ALL: [DatasetId; 5] = [
        DatasetId::NaturalQuestions,
        DatasetId::TwoWikiMultiHop,
        DatasetId::Bamboogle,
        DatasetId::StrategyQa,
        DatasetId::Fermi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::NaturalQuestions => "nq",
            DatasetId::TwoWikiMultiHop => "2wikimqa",
            DatasetId::Bamboogle => "bamboogle",
            DatasetId::StrategyQa => "strategyqa",
            DatasetId::Fermi => "fermi",
        }
    }

    pub fn metric(self) -> MetricKind {
        match self {
            DatasetId::NaturalQuestions | DatasetId::StrategyQa => MetricKind::ExactMatch,
            DatasetId::TwoWikiMultiHop | DatasetId::Bamboogle => MetricKind::TokenF1,
            DatasetId::Fermi => MetricKind::OrderOfMagnitude,
        }
    }

    pub fn is_multi_hop(self) -> bool {
        !matches!(self, DatasetId::NaturalQuestions)
    }

    /// Only 2WikiMQA ships intermediate answers.
    pub fn has_intermediate_answers(self) -> bool {
        matches!(self, DatasetId::TwoWikiMultiHop)
    }

    /// Score assigned to a decomposition that never reached a final answer.
    pub fn failure_score(self) -> f64 {
        match self {
            DatasetId::StrategyQa => 0.5,
            _ => 0.0,
        }
    }

    /// Number of few-shot exemplars in the prompts for this dataset.
    pub fn exemplar_count(self) -> usize {
        match self {
            DatasetId::NaturalQuestions | DatasetId::TwoWikiMultiHop | DatasetId::StrategyQa => 6,
            DatasetId::Fermi => 5,
            DatasetId::Bamboogle => 4,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetId::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown dataset `{s}` (expected one of nq, 2wikimqa, bamboogle, strategyqa, fermi)"))
    }
}

/// A benchmark question with its references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure_unit: Option<String>,
    pub dataset: DatasetId,
}

/// The three retrieval-noise tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Top1,
    LowRank,
    Random,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Top1, Tier::LowRank, Tier::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Top1 => "top1",
            Tier::LowRank => "lowrank",
            Tier::Random => "random",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One retrieved passage together with where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSnippet {
    /// The query this passage was retrieved for.
    pub query: String,
    pub rank: u32,
    pub title: String,
    pub text: String,
    pub tier: Tier,
    pub source: String,
}

impl EvidenceSnippet {
    /// The `title: text` form used on `ContextN:` prompt lines.
    pub fn display_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}: {}", self.title, self.text)
        }
    }
}

/// Evidence accumulated over a trace, in retrieval order. Append-only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextBundle {
    snippets: Vec<EvidenceSnippet>,
}

impl ContextBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, snippet: EvidenceSnippet) {
        self.snippets.push(snippet);
    }

    pub fn snippets(&self) -> &[EvidenceSnippet] {
        &self.snippets
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn tiers(&self) -> Vec<Tier> {
        self.snippets.iter().map(|s| s.tier).collect()
    }

    /// The first `n` snippets as a new bundle.
    pub fn prefix(&self, n: usize) -> ContextBundle {
        ContextBundle {
            snippets: self.snippets[..n.min(self.snippets.len())].to_vec(),
        }
    }
}

impl FromIterator<EvidenceSnippet> for ContextBundle {
    fn from_iter<I: IntoIterator<Item = EvidenceSnippet>>(iter: I) -> Self {
        ContextBundle {
            snippets: iter.into_iter().collect(),
        }
    }
}

/// A follow-up question and the intermediate answer given to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub follow_up: String,
    pub intermediate_answer: String,
}

impl Step {
    pub fn new(follow_up: impl Into<String>, intermediate_answer: impl Into<String>) -> Self {
        Step {
            follow_up: follow_up.into(),
            intermediate_answer: intermediate_answer.into(),
        }
    }
}

/// The evolving state of one Self-Ask decomposition.
///
/// `failed` is true exactly when no final answer was reached; the two fields
/// are only changed together through [`complete`](Self::complete) and
/// [`fail`](Self::fail).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TraceRepr")]
pub struct DecompositionTrace {
    pub question: String,
    pub contexts: ContextBundle,
    pub steps: Vec<Step>,
    final_answer: Option<String>,
    failed: bool,
    pub raw_text: String,
    pub used_retrieval: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Deserialize)]
struct TraceRepr {
    question: String,
    #[serde(default)]
    contexts: ContextBundle,
    #[serde(default)]
    steps: Vec<Step>,
    #[serde(default)]
    final_answer: Option<String>,
    failed: bool,
    #[serde(default)]
    raw_text: String,
    #[serde(default)]
    used_retrieval: bool,
    #[serde(default)]
    diagnostic: Option<String>,
}

impl TryFrom<TraceRepr> for DecompositionTrace {
    type Error = String;

    fn try_from(r: TraceRepr) -> Result<Self, Self::Error> {
        if r.failed == r.final_answer.is_some() {
            return Err("trace must be failed exactly when final_answer is absent".into());
        }
        if r.final_answer.is_some() && r.steps.len() >= MAX_GENERATION_STEPS {
            return Err(format!(
                "completed trace has {} steps; at most {} allowed",
                r.steps.len(),
                MAX_GENERATION_STEPS - 1
            ));
        }
        Ok(DecompositionTrace {
            question: r.question,
            contexts: r.contexts,
            steps: r.steps,
            final_answer: r.final_answer,
            failed: r.failed,
            raw_text: r.raw_text,
            used_retrieval: r.used_retrieval,
            diagnostic: r.diagnostic,
        })
    }
}

impl DecompositionTrace {
    /// A fresh, in-progress trace. It counts as failed until completed.
    pub fn new(question: impl Into<String>) -> Self {
        DecompositionTrace {
            question: question.into(),
            contexts: ContextBundle::new(),
            steps: Vec::new(),
            final_answer: None,
            failed: true,
            raw_text: String::new(),
            used_retrieval: false,
            diagnostic: None,
        }
    }

    /// A completed trace built from its structured parts.
    pub fn completed(question: impl Into<String>, steps: Vec<Step>, answer: impl Into<String>) -> Self {
        let mut trace = DecompositionTrace::new(question);
        trace.steps = steps;
        trace.complete(answer);
        trace
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.final_answer.as_deref()
    }

    pub fn failed(&self) -> bool {
        self.failed
    }

    pub fn complete(&mut self, answer: impl Into<String>) {
        self.final_answer = Some(answer.into());
        self.failed = false;
        self.diagnostic = None;
    }

    pub fn fail(&mut self, diagnostic: impl Into<String>) {
        self.final_answer = None;
        self.failed = true;
        self.diagnostic = Some(diagnostic.into());
    }

    /// Steps, final answer and failure flag: what survives a text round-trip.
    pub fn structure(&self) -> (&[Step], Option<&str>, bool) {
        (&self.steps, self.final_answer(), self.failed)
    }

    pub fn same_structure(&self, other: &DecompositionTrace) -> bool {
        self.structure() == other.structure()
    }
}

/// Per-trace scores for a gated run: the RALM output and the no-retrieval
/// fallback, scored independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedScores {
    pub with_retrieval: f64,
    pub without_retrieval: f64,
}

/// The scored result of answering one example under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub example_id: String,
    pub dataset: DatasetId,
    pub variant: VariantKind,
    #[serde(default)]
    pub nli_gated: bool,
    /// `None` when the run used no retrieval.
    pub noise_tier: Option<NoiseMode>,
    pub trace: DecompositionTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_scores: Option<PairedScores>,
    pub score: f64,
}

impl RunRecord {
    /// Variant label used as a report key, e.g. `sa-r@1-nli`.
    pub fn variant_label(&self) -> String {
        if self.nli_gated {
            format!("{}-nli", self.variant.as_str())
        } else {
            self.variant.as_str().to_string()
        }
    }

    pub fn tier_label(&self) -> &'static str {
        self.noise_tier.map_or("none", NoiseMode::as_str)
    }
}

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parse::{context_line, parse_step, parse_trace, trace_lines, Segment, INTERMEDIATE_ANSWER, QUESTION};
use crate::types::{ContextBundle, DatasetId, DecompositionTrace, EvidenceSnippet, Tier};

/// Rank recorded for exemplar evidence taken from the bottom of a result page.
pub const EXEMPLAR_LOW_RANK: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "sa-nr")]
    SaNr,
    #[serde(rename = "sa-r@1")]
    SaR1,
    #[serde(rename = "sa-r@10")]
    SaR10,
    #[serde(rename = "sa-rmix")]
    SaRMix,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [VariantKind::SaNr, VariantKind::SaR1, VariantKind::SaR10, VariantKind::SaRMix];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::SaNr => "sa-nr",
            VariantKind::SaR1 => "sa-r@1",
            VariantKind::SaR10 => "sa-r@10",
            VariantKind::SaRMix => "sa-rmix",
        }
    }

    /// Tier of exemplar evidence, `None` for the no-retrieval prompt.
    /// SA-RMix alternates and has no single tier.
    fn library_tier(self) -> Option<Tier> {
        match self {
            VariantKind::SaR1 => Some(Tier::Top1),
            VariantKind::SaR10 => Some(Tier::LowRank),
            VariantKind::SaNr | VariantKind::SaRMix => None,
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sa-nr" | "nr" => Ok(VariantKind::SaNr),
            "sa-r@1" | "sa-r1" | "r@1" => Ok(VariantKind::SaR1),
            "sa-r@10" | "sa-r10" | "r@10" => Ok(VariantKind::SaR10),
            "sa-rmix" | "rmix" => Ok(VariantKind::SaRMix),
            other => Err(format!("unknown prompt variant `{other}` (expected sa-nr, sa-r@1, sa-r@10, sa-rmix)")),
        }
    }
}

/// A gold decomposition shown in the prompt, with the evidence placed before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub contexts: ContextBundle,
    pub decomposition: DecompositionTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptVariant {
    pub kind: VariantKind,
    pub instruction: String,
    pub exemplars: Vec<Exemplar>,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read prompt file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("exemplar {index}: {message}")]
    Exemplar { index: usize, message: String },
    #[error("prompt library has no instruction block")]
    MissingInstruction,
    #[error("{kind} prompt has {found} exemplars; {dataset} prompts use {expected}")]
    ExemplarCount {
        kind: VariantKind,
        dataset: DatasetId,
        found: usize,
        expected: usize,
    },
    #[error("cannot mix libraries with {r1} and {r10} exemplars")]
    MixMismatch { r1: usize, r10: usize },
    #[error("{0} is assembled from the sa-r@1 and sa-r@10 libraries")]
    MixFromFile(VariantKind),
}

/// A classified line of an exemplar block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExemplarLine {
    Context { number: usize, payload: String },
    Question(String),
    Segment(Segment),
}

/// Splits a prompt library into `#`-separated blocks (lines equal to `#`).
pub fn split_blocks(text: &str) -> Vec<Vec<&str>> {
    let mut blocks = vec![Vec::new()];
    for line in text.lines() {
        if line.trim() == "#" {
            blocks.push(Vec::new());
        } else if !line.trim().is_empty() {
            blocks.last_mut().expect("non-empty").push(line);
        }
    }
    blocks
}

pub fn classify_exemplar_lines(block: &[&str]) -> Vec<ExemplarLine> {
    block
        .iter()
        .map(|line| {
            let t = line.trim();
            if let Some((number, payload)) = context_line(t) {
                ExemplarLine::Context {
                    number,
                    payload: payload.to_string(),
                }
            } else if let Some(q) = t.strip_prefix(QUESTION) {
                ExemplarLine::Question(q.trim().to_string())
            } else {
                ExemplarLine::Segment(parse_step(t))
            }
        })
        .collect()
}

/// `title: text` split at the first `": "`.
fn split_title(payload: &str) -> (String, String) {
    match payload.split_once(": ") {
        Some((title, text)) => (title.to_string(), text.to_string()),
        None => (String::new(), payload.to_string()),
    }
}

pub fn parse_exemplar(block: &[&str], tier: Option<Tier>, index: usize) -> Result<Exemplar, PromptError> {
    let err = |message: String| PromptError::Exemplar { index, message };
    let mut payloads = Vec::new();
    let mut question = None;
    let mut body = Vec::new();
    for (line, class) in block.iter().zip(classify_exemplar_lines(block)) {
        match class {
            ExemplarLine::Context { number, payload } if question.is_none() => {
                if number != payloads.len() + 1 {
                    return Err(err(format!("context lines out of order at Context{number}")));
                }
                payloads.push(payload);
            }
            ExemplarLine::Question(q) if question.is_none() => question = Some(q),
            ExemplarLine::Segment(Segment::Unparseable) => {
                return Err(err(format!("unparseable line: {}", line.trim())))
            }
            _ if question.is_none() => return Err(err("decomposition before the Question line".into())),
            _ => body.push(*line),
        }
    }
    let question = question.ok_or_else(|| err("missing Question line".into()))?;
    let mut decomposition = parse_trace(&body.join("\n"));
    if decomposition.failed() {
        return Err(err(decomposition.diagnostic.unwrap_or_default()));
    }
    decomposition.question = question.clone();

    let contexts = match (tier, payloads.is_empty()) {
        (_, true) => ContextBundle::new(),
        (None, false) => return Err(err("context lines in a no-retrieval prompt".into())),
        (Some(tier), false) => payloads
            .iter()
            .map(|p| {
                let (title, text) = split_title(p);
                EvidenceSnippet {
                    query: question.clone(),
                    rank: if tier == Tier::Top1 { 1 } else { EXEMPLAR_LOW_RANK },
                    title,
                    text,
                    tier,
                    source: "exemplar".into(),
                }
            })
            .collect(),
    };
    decomposition.contexts = contexts.clone();
    Ok(Exemplar { contexts, decomposition })
}

pub(crate) fn context_lines(contexts: &ContextBundle) -> impl Iterator<Item = String> + '_ {
    contexts
        .snippets()
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Context{}: {}", i + 1, s.display_text()))
}

/// An exemplar in prompt layout (no trailing newline).
pub fn serialize_exemplar(ex: &Exemplar) -> String {
    let mut lines: Vec<String> = context_lines(&ex.contexts).collect();
    lines.push(format!("{QUESTION} {}", ex.decomposition.question));
    lines.extend(trace_lines(&ex.decomposition, None));
    lines.join("\n")
}

impl PromptVariant {
    /// Parses a prompt library in the `#`-separated layout. The trailing
    /// empty `Question:` slot, if present, is dropped.
    pub fn from_library(kind: VariantKind, text: &str) -> Result<Self, PromptError> {
        if kind == VariantKind::SaRMix {
            return Err(PromptError::MixFromFile(kind));
        }
        let mut blocks = split_blocks(text);
        if blocks.is_empty() || blocks[0].is_empty() {
            return Err(PromptError::MissingInstruction);
        }
        let instruction = blocks.remove(0).iter().map(|l| l.trim()).collect::<Vec<_>>().join("\n");
        if let Some(last) = blocks.last() {
            if last.is_empty() || (last.len() == 1 && last[0].trim() == QUESTION) {
                blocks.pop();
            }
        }
        let exemplars = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| parse_exemplar(b, kind.library_tier(), i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PromptVariant {
            kind,
            instruction,
            exemplars,
        })
    }

    pub fn from_file(kind: VariantKind, path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_library(kind, &text)
    }

    /// SA-RMix: exemplar k (1-indexed) comes from the top-1 library when k is
    /// odd and from the low-rank library when k is even.
    pub fn mix(top1: &PromptVariant, low_rank: &PromptVariant) -> Result<Self, PromptError> {
        if top1.exemplars.len() != low_rank.exemplars.len() {
            return Err(PromptError::MixMismatch {
                r1: top1.exemplars.len(),
                r10: low_rank.exemplars.len(),
            });
        }
        let exemplars = top1
            .exemplars
            .iter()
            .zip(&low_rank.exemplars)
            .enumerate()
            .map(|(i, (a, b))| if i % 2 == 0 { a.clone() } else { b.clone() })
            .collect();
        Ok(PromptVariant {
            kind: VariantKind::SaRMix,
            instruction: top1.instruction.clone(),
            exemplars,
        })
    }

    pub fn check_exemplar_count(&self, dataset: DatasetId) -> Result<(), PromptError> {
        let expected = dataset.exemplar_count();
        if self.exemplars.len() != expected {
            return Err(PromptError::ExemplarCount {
                kind: self.kind,
                dataset,
                found: self.exemplars.len(),
                expected,
            });
        }
        Ok(())
    }
}

/// The three prompt libraries of one dataset, from which all four variants
/// are built.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub no_retrieval: PromptVariant,
    pub top1: PromptVariant,
    pub low_rank: PromptVariant,
}

pub const BUILTIN_NQ_SA_NR: &str = include_str!("../../prompts/nq/sa-nr.txt");
pub const BUILTIN_NQ_SA_R1: &str = include_str!("../../prompts/nq/sa-r1.txt");
pub const BUILTIN_NQ_SA_R10: &str = include_str!("../../prompts/nq/sa-r10.txt");

impl PromptSet {
    pub fn from_texts(nr: &str, r1: &str, r10: &str) -> Result<Self, PromptError> {
        Ok(PromptSet {
            no_retrieval: PromptVariant::from_library(VariantKind::SaNr, nr)?,
            top1: PromptVariant::from_library(VariantKind::SaR1, r1)?,
            low_rank: PromptVariant::from_library(VariantKind::SaR10, r10)?,
        })
    }

    /// The bundled Natural Questions prompts.
    pub fn builtin_nq() -> Self {
        Self::from_texts(BUILTIN_NQ_SA_NR, BUILTIN_NQ_SA_R1, BUILTIN_NQ_SA_R10)
            .expect("bundled prompts parse")
    }

    /// Loads `sa-nr.txt`, `sa-r1.txt` and `sa-r10.txt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        Ok(PromptSet {
            no_retrieval: PromptVariant::from_file(VariantKind::SaNr, &dir.join("sa-nr.txt"))?,
            top1: PromptVariant::from_file(VariantKind::SaR1, &dir.join("sa-r1.txt"))?,
            low_rank: PromptVariant::from_file(VariantKind::SaR10, &dir.join("sa-r10.txt"))?,
        })
    }

    pub fn variant(&self, kind: VariantKind) -> Result<PromptVariant, PromptError> {
        Ok(match kind {
            VariantKind::SaNr => self.no_retrieval.clone(),
            VariantKind::SaR1 => self.top1.clone(),
            VariantKind::SaR10 => self.low_rank.clone(),
            VariantKind::SaRMix => PromptVariant::mix(&self.top1, &self.low_rank)?,
        })
    }

    pub fn check_exemplar_count(&self, dataset: DatasetId) -> Result<(), PromptError> {
        self.no_retrieval.check_exemplar_count(dataset)?;
        self.top1.check_exemplar_count(dataset)?;
        self.low_rank.check_exemplar_count(dataset)
    }
}

/// Context lines, the question and the partial decomposition, one per line.
pub(crate) fn query_block_lines(
    contexts: &ContextBundle,
    partial: &DecompositionTrace,
    pending: Option<&str>,
) -> Vec<String> {
    let mut lines: Vec<String> = context_lines(contexts).collect();
    lines.push(format!("{QUESTION} {}", partial.question));
    lines.extend(trace_lines(partial, pending));
    lines
}

fn render_with(variant: &PromptVariant, query_block: &str) -> String {
    let mut out = String::new();
    out.push_str(&variant.instruction);
    out.push_str("\n#\n");
    for ex in &variant.exemplars {
        out.push_str(&serialize_exemplar(ex));
        out.push_str("\n#\n");
    }
    out.push_str(query_block);
    out
}

/// Full prompt: instruction, `#`-separated exemplars, then the cumulative
/// `Context1..K` lines, the question and the steps generated so far. Ends
/// with a newline so the model continues on a fresh line.
pub fn render_prompt(variant: &PromptVariant, contexts: &ContextBundle, partial: &DecompositionTrace) -> String {
    let mut block = query_block_lines(contexts, partial, None).join("\n");
    block.push('\n');
    render_with(variant, &block)
}

/// Like [`render_prompt`] but with an unanswered follow-up question, ending in
/// `Intermediate answer:` so the model completes only the answer.
pub fn render_prompt_for_answer(
    variant: &PromptVariant,
    contexts: &ContextBundle,
    partial: &DecompositionTrace,
    follow_up: &str,
) -> String {
    let mut block = query_block_lines(contexts, partial, Some(follow_up)).join("\n");
    block.push('\n');
    block.push_str(INTERMEDIATE_ANSWER);
    render_with(variant, &block)
}

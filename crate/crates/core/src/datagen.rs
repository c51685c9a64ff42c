//! Fine-tuning corpora with mixed-relevance evidence.
//!
//! Single-hop: one example per answerable question, with the question's
//! evidence drawn from a noise tier and the gold answer as target.
//!
//! Multi-hop: no-retrieval decompositions are filtered (self-consistency or
//! gold intermediate answers), evidence is retrieved for the question and
//! each follow-up with an independently drawn tier, and every generated line
//! becomes its own example.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::controller::{Controller, ControllerError, Sampling};
use crate::dataset::write_jsonl;
use crate::eval::{is_correct, normalize_answer, EvalError};
use crate::retrieval::{draw_tier, NoRetrieval, NoiseMode, RetrievalError, Retriever};
use crate::rng;
use crate::selfask::{context_lines, trace_lines, PromptVariant, FINAL_ANSWER, QUESTION};
use crate::types::{ContextBundle, DecompositionTrace, QaExample, Tier};

pub const SAMPLING_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("example {0} has no intermediate answers")]
    MissingIntermediates(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainingExample {
    pub question_id: String,
    pub step_index: usize,
    pub input: String,
    pub target: String,
    pub tiers: Vec<Tier>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationBudget {
    pub max_questions_single_hop: usize,
    pub max_questions_multi_hop: usize,
    /// Greedy decomposition plus sampled ones.
    pub samples_per_question: usize,
}

impl Default for GenerationBudget {
    fn default() -> Self {
        GenerationBudget {
            max_questions_single_hop: 1000,
            max_questions_multi_hop: 500,
            samples_per_question: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    GoldIntermediate,
    SelfConsistency,
}

impl std::str::FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold-intermediate" => Ok(FilterMode::GoldIntermediate),
            "self-consistency" => Ok(FilterMode::SelfConsistency),
            other => Err(format!("unknown mode `{other}` (expected gold-intermediate or self-consistency)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub seed: u64,
    /// How evidence tiers are chosen per retrieval.
    pub noise: NoiseMode,
    pub budget: GenerationBudget,
}

impl DatagenConfig {
    pub fn new(seed: u64) -> Self {
        DatagenConfig {
            seed,
            noise: NoiseMode::UniformMix,
            budget: GenerationBudget::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub questions_seen: usize,
    pub questions_kept: usize,
    pub rejected_by_filter: usize,
    pub skipped_retrieval: usize,
    /// kept / (kept + rejected); absent when nothing was judged.
    pub acceptance_rate: Option<f64>,
}

impl FilterStats {
    fn finish(&mut self) {
        let judged = self.questions_kept + self.rejected_by_filter;
        self.acceptance_rate = (judged > 0).then(|| self.questions_kept as f64 / judged as f64);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<TrainingExample>,
    /// Kept decompositions (with their evidence) for the sidecar file.
    pub traces: Vec<KeptTrace>,
    pub stats: FilterStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptTrace {
    pub question_id: String,
    pub trace: DecompositionTrace,
}

/// Number of contexts visible when each target line is produced: the
/// question's evidence, plus one per follow-up question asked so far.
fn visible_contexts(line: &str, follow_ups_so_far: usize) -> usize {
    if line.starts_with(crate::selfask::FOLLOW_UP) {
        follow_ups_so_far
    } else {
        follow_ups_so_far + 1
    }
}

/// Splits a completed trace into (input, target) pairs, one per generated
/// line: each follow-up, each intermediate answer, then the final answer.
/// Each input holds the contexts retrieved so far, the question, and the
/// lines before the target; the decision line is always part of the input.
pub fn split_steps(trace: &DecompositionTrace, contexts: &ContextBundle) -> Vec<(String, String, Vec<Tier>)> {
    if trace.failed() {
        return Vec::new();
    }
    let lines = trace_lines(trace, None);
    let mut out = Vec::new();
    let mut follow_ups = 0;
    for j in 1..lines.len() {
        let target = &lines[j];
        if target.starts_with(crate::selfask::FOLLOW_UP) {
            follow_ups += 1;
        }
        let visible = contexts.prefix(visible_contexts(target, follow_ups));
        let mut input_lines: Vec<String> = context_lines(&visible).collect();
        input_lines.push(format!("{QUESTION} {}", trace.question));
        input_lines.extend(lines[..j].iter().cloned());
        let mut input = input_lines.join("\n");
        input.push('\n');
        out.push((input, target.clone(), visible.tiers()));
    }
    out
}

fn to_examples(question_id: &str, pairs: Vec<(String, String, Vec<Tier>)>) -> Vec<TrainingExample> {
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (input, target, tiers))| TrainingExample {
            question_id: question_id.to_string(),
            step_index: i,
            input,
            target,
            tiers,
        })
        .collect()
}

/// True iff the no-retrieval greedy answer gets full credit.
pub fn verify_answerable(
    example: &QaExample,
    generator: &dyn crate::backends::Generator,
    no_retrieval: &PromptVariant,
) -> Result<bool, DatagenError> {
    let ctl = Controller::new(generator, &NoRetrieval);
    let answered = ctl.decompose(example, no_retrieval, None, Sampling::GREEDY)?;
    Ok(is_correct(&answered.trace, example)?)
}

/// Evidence for `queries` in order, one tier draw per retrieval. `None` when
/// any retrieval fails.
fn retrieve_all(
    question_id: &str,
    queries: &[&str],
    retriever: &dyn Retriever,
    config: &DatagenConfig,
) -> Result<Option<ContextBundle>, RetrievalError> {
    let mut bundle = ContextBundle::new();
    for (i, q) in queries.iter().enumerate() {
        let mut r = rng::stream(config.seed, &format!("datagen/{question_id}"), i as u64);
        let tier = draw_tier(config.noise, &mut r);
        match retriever.retrieve(q, tier, &mut r) {
            Ok(s) => bundle.push(s),
            Err(e @ (RetrievalError::CacheMiss(_) | RetrievalError::LowRankUnavailable { .. })) => {
                warn!(question = question_id, error = %e, "skipping question");
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Some(bundle))
}

/// One example per verified question, target = the first gold answer.
pub fn gen_single_hop(
    examples: &[QaExample],
    generator: &dyn crate::backends::Generator,
    no_retrieval: &PromptVariant,
    retriever: &dyn Retriever,
    config: &DatagenConfig,
) -> Result<Corpus, DatagenError> {
    let mut stats = FilterStats::default();
    let mut out = Vec::new();
    let mut traces = Vec::new();
    for ex in examples {
        if stats.questions_kept >= config.budget.max_questions_single_hop {
            break;
        }
        stats.questions_seen += 1;
        if !verify_answerable(ex, generator, no_retrieval)? {
            stats.rejected_by_filter += 1;
            continue;
        }
        let Some(contexts) = retrieve_all(&ex.id, &[&ex.question], retriever, config).map_err(ControllerError::from)?
        else {
            stats.skipped_retrieval += 1;
            continue;
        };
        let mut trace = DecompositionTrace::completed(ex.question.clone(), Vec::new(), ex.gold_answers[0].clone());
        trace.contexts = contexts.clone();
        trace.used_retrieval = true;
        out.extend(to_examples(&ex.id, split_steps(&trace, &contexts)));
        traces.push(KeptTrace {
            question_id: ex.id.clone(),
            trace,
        });
        stats.questions_kept += 1;
    }
    stats.finish();
    out.sort();
    Ok(Corpus {
        examples: out,
        traces,
        stats,
    })
}

/// Every gold intermediate answer occurs (normalized) inside some generated
/// intermediate answer.
pub fn contains_gold_intermediates(trace: &DecompositionTrace, golds: &[String]) -> bool {
    let generated: Vec<String> = trace.steps.iter().map(|s| normalize_answer(&s.intermediate_answer)).collect();
    golds.iter().all(|g| {
        let g = normalize_answer(g);
        generated.iter().any(|a| a.contains(&g))
    })
}

/// Keeps the greedy no-retrieval decomposition of a question when it passes
/// the filter, then attaches mixed-tier evidence to it.
pub fn gen_multi_hop(
    examples: &[QaExample],
    generator: &dyn crate::backends::Generator,
    no_retrieval: &PromptVariant,
    retriever: &dyn Retriever,
    mode: FilterMode,
    config: &DatagenConfig,
) -> Result<Corpus, DatagenError> {
    let ctl = Controller::new(generator, retriever);
    let mut stats = FilterStats::default();
    let mut out = Vec::new();
    let mut traces = Vec::new();
    for ex in examples {
        if stats.questions_kept >= config.budget.max_questions_multi_hop {
            break;
        }
        if mode == FilterMode::GoldIntermediate && ex.intermediate_answers.is_none() {
            return Err(DatagenError::MissingIntermediates(ex.id.clone()));
        }
        stats.questions_seen += 1;
        let greedy = ctl.decompose(ex, no_retrieval, None, Sampling::GREEDY)?.trace;
        let keep = match mode {
            FilterMode::SelfConsistency => {
                let mut all = is_correct(&greedy, ex)?;
                for i in 1..config.budget.samples_per_question {
                    if !all {
                        break;
                    }
                    let sampled = ctl.decompose(ex, no_retrieval, None, Sampling::sampled(SAMPLING_TEMPERATURE, i as u32))?;
                    all = is_correct(&sampled.trace, ex)?;
                }
                all
            }
            FilterMode::GoldIntermediate => {
                let golds = ex.intermediate_answers.as_deref().unwrap_or_default();
                is_correct(&greedy, ex)? && contains_gold_intermediates(&greedy, golds)
            }
        };
        if !keep {
            stats.rejected_by_filter += 1;
            continue;
        }
        let mut queries: Vec<&str> = vec![&ex.question];
        queries.extend(greedy.steps.iter().map(|s| s.follow_up.as_str()));
        let Some(contexts) = retrieve_all(&ex.id, &queries, retriever, config).map_err(ControllerError::from)? else {
            stats.skipped_retrieval += 1;
            continue;
        };
        let mut trace = greedy;
        trace.contexts = contexts.clone();
        trace.used_retrieval = true;
        out.extend(to_examples(&ex.id, split_steps(&trace, &contexts)));
        traces.push(KeptTrace {
            question_id: ex.id.clone(),
            trace,
        });
        stats.questions_kept += 1;
    }
    stats.finish();
    out.sort();
    info!(kept = stats.questions_kept, seen = stats.questions_seen, "multi-hop corpus generated");
    Ok(Corpus {
        examples: out,
        traces,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub kind: String,
    pub noise: NoiseMode,
    pub budget: GenerationBudget,
    pub examples: usize,
    pub questions: usize,
    pub tier_counts: BTreeMap<Tier, usize>,
    pub filter: FilterStats,
}

impl Manifest {
    pub fn new(kind: &str, corpus: &Corpus, config: &DatagenConfig) -> Self {
        let mut tier_counts = BTreeMap::new();
        for t in &corpus.traces {
            for tier in t.trace.contexts.tiers() {
                *tier_counts.entry(tier).or_insert(0) += 1;
            }
        }
        Manifest {
            seed: config.seed,
            kind: kind.to_string(),
            noise: config.noise,
            budget: config.budget,
            examples: corpus.examples.len(),
            questions: corpus.traces.len(),
            tier_counts,
            filter: corpus.stats.clone(),
        }
    }
}

/// Writes `corpus.jsonl`, `traces.jsonl` and `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, manifest: &Manifest) -> Result<(), DatagenError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| DatagenError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("corpus.jsonl");
    write_jsonl(&p, &corpus.examples).map_err(io_err(&p))?;
    let p = dir.join("traces.jsonl");
    write_jsonl(&p, &corpus.traces).map_err(io_err(&p))?;
    let p = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&p, json).map_err(io_err(&p))?;
    Ok(())
}

/// The final-answer line used as the single-hop target.
pub fn final_answer_line(answer: &str) -> String {
    format!("{FINAL_ANSWER} {answer}")
}

//! The interleaved decomposition loop.
//!
//! Each question is answered by alternating two kinds of generation call:
//!
//! * an *open* call on the full prompt, cut before any `Intermediate answer:`
//!   line, which yields either a follow-up question or the final answer;
//! * after a follow-up question, evidence for it is retrieved and appended,
//!   then an *answer* call on a prompt ending in `Intermediate answer:`
//!   produces the intermediate answer with retrieval in view.
//!
//! Open calls are the generation steps counted against the step limit.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::backends::{prompt_hash, BackendError, Decoding, EntailmentModel, GenerationRequest, Generator, DEFAULT_MAX_TOKENS};
use crate::nligate::{self, BackOffReason, GateDecision, GateError};
use crate::retrieval::{draw_tier, NoisePolicy, RetrievalError, Retriever};
use crate::selfask::{
    parse_step, render_prompt, render_prompt_for_answer, PromptVariant, Segment, INTERMEDIATE_ANSWER,
};
use crate::types::{DecompositionTrace, QaExample, Step, Tier, MAX_GENERATION_STEPS};

/// Open calls stop before an intermediate answer or the next exemplar.
pub const OPEN_STOP_MARKERS: [&str; 2] = ["\nIntermediate answer:", "\n#"];
/// Answer calls stop at the end of the line.
pub const ANSWER_STOP_MARKERS: [&str; 1] = ["\n"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Retrieve,
    Open,
    Answer,
}

/// One line of the debugging event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerEvent {
    pub example_id: String,
    pub step: usize,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answered {
    pub trace: DecompositionTrace,
    pub events: Vec<ControllerEvent>,
    pub retrieval_calls: usize,
    pub generation_calls: usize,
}

/// Decoding settings for one decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub decoding: Decoding,
    pub sample_index: u32,
}

impl Sampling {
    pub const GREEDY: Sampling = Sampling {
        decoding: Decoding::Greedy,
        sample_index: 0,
    };

    pub fn sampled(temperature: f64, sample_index: u32) -> Self {
        Sampling {
            decoding: Decoding::Sampled { temperature },
            sample_index,
        }
    }
}

pub struct Controller<'a> {
    pub generator: &'a dyn Generator,
    pub retriever: &'a dyn Retriever,
    pub max_tokens: u32,
}

/// Outcome of the gated strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAnswer {
    pub chosen: DecompositionTrace,
    pub gate: GateDecision,
    pub events: Vec<ControllerEvent>,
}

struct Run<'c, 'a> {
    ctl: &'c Controller<'a>,
    example_id: &'c str,
    sampling: Sampling,
    policy: Option<&'c NoisePolicy>,
    events: Vec<ControllerEvent>,
    retrieval_calls: usize,
    generation_calls: usize,
}

impl Run<'_, '_> {
    fn generate(&mut self, prompt: String, stops: &[&str], kind: EventKind, step: usize) -> Result<String, BackendError> {
        let mut req = GenerationRequest::greedy(prompt, stops);
        req.decoding = self.sampling.decoding;
        req.sample_index = self.sampling.sample_index;
        req.max_tokens = self.ctl.max_tokens;
        let started = Instant::now();
        let text = self.ctl.generator.generate(&req)?;
        self.generation_calls += 1;
        self.events.push(ControllerEvent {
            example_id: self.example_id.to_string(),
            step,
            kind,
            prompt_hash: Some(prompt_hash(&req.prompt)),
            tier: None,
            latency_ms: started.elapsed().as_millis() as u64,
        });
        Ok(text)
    }

    fn retrieve(&mut self, query: &str, step: usize, trace: &mut DecompositionTrace) -> Result<(), RetrievalError> {
        let policy = self.policy.expect("retrieval requires a noise policy");
        let mut rng = policy.rng_for(self.example_id, self.retrieval_calls as u64);
        let tier = draw_tier(policy.mode, &mut rng);
        let started = Instant::now();
        self.retrieval_calls += 1;
        let snippet = self.ctl.retriever.retrieve(query, tier, &mut rng)?;
        self.events.push(ControllerEvent {
            example_id: self.example_id.to_string(),
            step,
            kind: EventKind::Retrieve,
            prompt_hash: None,
            tier: Some(tier),
            latency_ms: started.elapsed().as_millis() as u64,
        });
        trace.contexts.push(snippet);
        Ok(())
    }
}

/// The first follow-up question or final answer in an open-call continuation.
/// A leading decision line is skipped.
fn first_structural(text: &str) -> Result<Segment, String> {
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match parse_step(line) {
            Segment::NoFollowUpNeeded | Segment::FollowUpNeeded => continue,
            s @ (Segment::FollowUp(_) | Segment::FinalAnswer(_)) => return Ok(s),
            Segment::IntermediateAnswer(_) => return Err("intermediate answer without a follow-up question".into()),
            Segment::Unparseable => return Err(format!("unparseable output: {line}")),
        }
    }
    Err("empty continuation".into())
}

impl<'a> Controller<'a> {
    pub fn new(generator: &'a dyn Generator, retriever: &'a dyn Retriever) -> Self {
        Controller {
            generator,
            retriever,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// Greedy decomposition; `policy` only matters when `use_retrieval` is set.
    pub fn answer_question(
        &self,
        example: &QaExample,
        variant: &PromptVariant,
        policy: &NoisePolicy,
        use_retrieval: bool,
    ) -> Result<Answered, ControllerError> {
        self.decompose(example, variant, use_retrieval.then_some(policy), Sampling::GREEDY)
    }

    /// One decomposition. Retrieval happens iff `policy` is given: once for the
    /// original question (a miss there is an error) and once per follow-up
    /// question (a miss there fails the trace).
    pub fn decompose(
        &self,
        example: &QaExample,
        variant: &PromptVariant,
        policy: Option<&NoisePolicy>,
        sampling: Sampling,
    ) -> Result<Answered, ControllerError> {
        let mut run = Run {
            ctl: self,
            example_id: &example.id,
            sampling,
            policy,
            events: Vec::new(),
            retrieval_calls: 0,
            generation_calls: 0,
        };
        let mut trace = DecompositionTrace::new(example.question.clone());
        trace.used_retrieval = policy.is_some();
        let mut raw = Vec::new();

        if policy.is_some() {
            run.retrieve(&example.question, 0, &mut trace)?;
        }

        let mut outcome: Option<Result<String, String>> = None;
        for step in 1..=MAX_GENERATION_STEPS {
            let prompt = render_prompt(variant, &trace.contexts, &trace);
            let text = run.generate(prompt, &OPEN_STOP_MARKERS, EventKind::Open, step)?;
            raw.push(text.clone());
            let follow_up = match first_structural(&text) {
                Ok(Segment::FinalAnswer(a)) => {
                    outcome = Some(Ok(a));
                    break;
                }
                Ok(Segment::FollowUp(q)) => q,
                Ok(_) => unreachable!("first_structural yields follow-ups and final answers only"),
                Err(diag) => {
                    outcome = Some(Err(diag));
                    break;
                }
            };

            if policy.is_some() {
                match run.retrieve(&follow_up, step, &mut trace) {
                    Ok(()) => {}
                    Err(e @ (RetrievalError::CacheMiss(_) | RetrievalError::LowRankUnavailable { .. })) => {
                        outcome = Some(Err(format!("retrieval for follow-up failed: {e}")));
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }

            let prompt = render_prompt_for_answer(variant, &trace.contexts, &trace, &follow_up);
            let answer = run.generate(prompt, &ANSWER_STOP_MARKERS, EventKind::Answer, step)?;
            raw.push(format!("{INTERMEDIATE_ANSWER}{answer}"));
            let answer = answer.trim();
            if answer.is_empty() {
                outcome = Some(Err("empty intermediate answer".into()));
                break;
            }
            trace.steps.push(Step::new(follow_up, answer));
        }

        trace.raw_text = raw.join("\n");
        match outcome {
            Some(Ok(answer)) => trace.complete(answer),
            Some(Err(diag)) => trace.fail(diag),
            None => trace.fail(format!("no final answer within {MAX_GENERATION_STEPS} generation steps")),
        }
        debug!(id = %example.id, steps = trace.steps.len(), failed = trace.failed(), "decomposition finished");
        Ok(Answered {
            trace,
            events: run.events,
            retrieval_calls: run.retrieval_calls,
            generation_calls: run.generation_calls,
        })
    }

    /// Answers with and without retrieval and keeps the retrieval trace only
    /// if every answer in it is entailed by the evidence. Entailment failures
    /// back off instead of propagating.
    #[allow(clippy::too_many_arguments)]
    pub fn answer_with_nli_backoff(
        &self,
        example: &QaExample,
        variant: &PromptVariant,
        fallback_variant: &PromptVariant,
        policy: &NoisePolicy,
        nli: &dyn EntailmentModel,
        threshold: f64,
    ) -> Result<GatedAnswer, ControllerError> {
        let ralm = self.decompose(example, variant, Some(policy), Sampling::GREEDY)?;
        let fallback = self.decompose(example, fallback_variant, None, Sampling::GREEDY)?;
        let mut events = ralm.events;
        events.extend(fallback.events);

        let mut gate = if ralm.trace.failed() {
            GateDecision::back_off(BackOffReason::RalmFailed, threshold)
        } else {
            match nligate::evaluate(&ralm.trace, &ralm.trace.contexts, nli, threshold) {
                Ok(d) => d,
                Err(e @ (GateError::Backend(_) | GateError::EmptyPremise | GateError::FailedTrace)) => {
                    GateDecision::back_off(BackOffReason::GateError(e.to_string()), threshold)
                }
            }
        };
        let chosen = if gate.accepted() {
            ralm.trace.clone()
        } else {
            fallback.trace.clone()
        };
        gate.ralm_trace = Some(ralm.trace);
        gate.fallback_trace = Some(fallback.trace);
        Ok(GatedAnswer { chosen, gate, events })
    }
}

//! Deterministic backends for replay and tests.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    BackendError, Decoding, EntailmentModel, EntailmentRequest, GenerationRequest, Generator, NliProbabilities,
};

/// One recorded generation: `(prompt_hash, decoding, sample_index) -> continuation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt_hash: String,
    pub decoding: Decoding,
    #[serde(default)]
    pub sample_index: u32,
    pub continuation: String,
}

impl TranscriptEntry {
    fn key(&self) -> String {
        format!("{}|{}|{}", self.prompt_hash, self.decoding.label(), self.sample_index)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Protocol(format!("{}: {e}", path.display()))
}

/// Replays continuations from a transcript, keyed on the prompt hash.
#[derive(Debug, Default)]
pub struct ReplayGenerator {
    entries: HashMap<String, String>,
}

impl ReplayGenerator {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        ReplayGenerator {
            entries: entries.into_iter().map(|e| (e.key(), e.continuation)).collect(),
        }
    }

    /// Loads a line-delimited transcript file.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: TranscriptEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Protocol(format!("{} line {}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Generator for ReplayGenerator {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let key = request.transcript_key();
        self.entries
            .get(&key)
            .cloned()
            .ok_or(BackendError::TranscriptMiss(key))
    }
}

/// Wraps another generator and records every exchange so it can be replayed.
pub struct RecordingGenerator<G> {
    inner: G,
    recorded: Mutex<BTreeMap<String, TranscriptEntry>>,
}

impl<G: Generator> RecordingGenerator<G> {
    pub fn new(inner: G) -> Self {
        RecordingGenerator {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries ordered by key.
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.recorded.lock().expect("poisoned").values().cloned().collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), BackendError> {
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        for e in self.entries() {
            let line = serde_json::to_string(&e).expect("entry serializes");
            writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }
}

impl<G: Generator> Generator for RecordingGenerator<G> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let text = self.inner.complete(request)?;
        let entry = TranscriptEntry {
            prompt_hash: request.prompt_hash(),
            decoding: request.decoding,
            sample_index: request.sample_index,
            continuation: text.clone(),
        };
        self.recorded.lock().expect("poisoned").insert(entry.key(), entry);
        Ok(text)
    }
}

type GenerateFn = dyn Fn(&GenerationRequest) -> Result<String, BackendError> + Send + Sync;

/// A generator defined by a function of the request.
pub struct FnGenerator(Box<GenerateFn>);

impl FnGenerator {
    pub fn new(f: impl Fn(&GenerationRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        FnGenerator(Box::new(f))
    }
}

impl Generator for FnGenerator {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (self.0)(request)
    }
}

/// Hands out queued continuations in order, and records the prompts it saw.
#[derive(Default)]
pub struct SequenceGenerator {
    queue: Mutex<VecDeque<String>>,
    prompts: Mutex<Vec<String>>,
}

impl SequenceGenerator {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        SequenceGenerator {
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("poisoned").clone()
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("poisoned").len()
    }
}

impl Generator for SequenceGenerator {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.prompts.lock().expect("poisoned").push(request.prompt.clone());
        self.queue
            .lock()
            .expect("poisoned")
            .pop_front()
            .ok_or_else(|| BackendError::TranscriptMiss("sequence exhausted".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableLine {
    #[serde(default)]
    premise: Option<String>,
    hypothesis: String,
    p_entail: f64,
    #[serde(default)]
    p_neutral: Option<f64>,
    #[serde(default)]
    p_contradict: Option<f64>,
}

/// Lookup-table NLI double. Exact `(premise, hypothesis)` entries win over
/// hypothesis-only entries; anything else is a transcript miss unless a
/// default is set.
#[derive(Debug, Default, Clone)]
pub struct TableEntailment {
    exact: HashMap<(String, String), NliProbabilities>,
    by_hypothesis: HashMap<String, NliProbabilities>,
    default: Option<NliProbabilities>,
}

impl TableEntailment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(mut self, p_entail: f64) -> Self {
        self.default = Some(NliProbabilities::from_entail(p_entail));
        self
    }

    pub fn insert(&mut self, premise: &str, hypothesis: &str, p_entail: f64) {
        self.exact
            .insert((premise.to_string(), hypothesis.to_string()), NliProbabilities::from_entail(p_entail));
    }

    pub fn insert_hypothesis(&mut self, hypothesis: &str, p_entail: f64) {
        self.by_hypothesis
            .insert(hypothesis.to_string(), NliProbabilities::from_entail(p_entail));
    }

    /// Loads `{premise?, hypothesis, p_entail, p_neutral?, p_contradict?}` lines.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut table = TableEntailment::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: TableLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Protocol(format!("{} line {}: {e}", path.display(), i + 1)))?;
            let mut p = NliProbabilities::from_entail(l.p_entail);
            if let (Some(n), Some(c)) = (l.p_neutral, l.p_contradict) {
                p.p_neutral = n;
                p.p_contradict = c;
            }
            match l.premise {
                Some(premise) => {
                    table.exact.insert((premise, l.hypothesis), p);
                }
                None => {
                    table.by_hypothesis.insert(l.hypothesis, p);
                }
            }
        }
        Ok(table)
    }
}

impl EntailmentModel for TableEntailment {
    fn probabilities(&self, request: &EntailmentRequest) -> Result<NliProbabilities, BackendError> {
        self.exact
            .get(&(request.premise.clone(), request.hypothesis.clone()))
            .or_else(|| self.by_hypothesis.get(&request.hypothesis))
            .copied()
            .or(self.default)
            .ok_or_else(|| BackendError::TranscriptMiss(format!("entailment for `{}`", request.hypothesis)))
    }
}

type EntailFn = dyn Fn(&EntailmentRequest) -> Result<NliProbabilities, BackendError> + Send + Sync;

pub struct FnEntailment(Box<EntailFn>);

impl FnEntailment {
    pub fn new(
        f: impl Fn(&EntailmentRequest) -> Result<NliProbabilities, BackendError> + Send + Sync + 'static,
    ) -> Self {
        FnEntailment(Box::new(f))
    }

    /// A model returning the same entailment probability for every pair.
    pub fn constant(p_entail: f64) -> Self {
        Self::new(move |_| Ok(NliProbabilities::from_entail(p_entail)))
    }
}

impl EntailmentModel for FnEntailment {
    fn probabilities(&self, request: &EntailmentRequest) -> Result<NliProbabilities, BackendError> {
        (self.0)(request)
    }
}

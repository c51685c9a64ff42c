//! Text-generation and entailment service contracts.
//!
//! Wire protocol (HTTP + JSON, see [`http`]):
//!
//! ```text
//! POST {base}/generate  {"prompt": "...", "greedy": true, "stop": ["\n#"], "max_tokens": 256}
//!                       {"prompt": "...", "temperature": 0.7, "sample_index": 2, "stop": [...], "max_tokens": 256}
//!                    -> {"text": "..."}
//! POST {base}/entail    {"premise": "...", "hypothesis": "..."}
//!                    -> {"p_entail": 0.9, "p_neutral": 0.07, "p_contradict": 0.03}
//! ```
//!
//! Every continuation is cut at the first stop marker on the client side, so
//! servers that ignore `stop` still behave.

pub mod http;
pub mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpEntailment, HttpGenerator, HttpSettings};
pub use scripted::{
    FnEntailment, FnGenerator, RecordingGenerator, ReplayGenerator, SequenceGenerator, TableEntailment,
    TranscriptEntry,
};

pub const DEFAULT_MAX_TOKENS: u32 = 256;
pub const DEFAULT_INFLIGHT_LIMIT: usize = 8;
pub const DEFAULT_ENTAILMENT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Network-level failure; the request may be retried.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no transcript entry for {0}")]
    TranscriptMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sampled { temperature: f64 },
}

impl Decoding {
    /// Stable text form used in transcript keys, e.g. `greedy` or `t=0.7000`.
    pub fn label(&self) -> String {
        match self {
            Decoding::Greedy => "greedy".into(),
            Decoding::Sampled { temperature } => format!("t={temperature:.4}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub decoding: Decoding,
    /// Distinguishes repeated sampled requests for the same prompt. Zero for
    /// greedy decoding.
    pub sample_index: u32,
    pub stop_markers: Vec<String>,
    pub max_tokens: u32,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, stop_markers: &[&str]) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            decoding: Decoding::Greedy,
            sample_index: 0,
            stop_markers: stop_markers.iter().map(|s| s.to_string()).collect(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if let Decoding::Sampled { temperature } = self.decoding {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(BackendError::InvalidRequest(format!(
                    "sampling temperature must be positive, got {temperature}"
                )));
            }
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.prompt)
    }

    /// `(prompt-hash, decoding, sample-index)` as used by transcripts.
    pub fn transcript_key(&self) -> String {
        format!("{}|{}|{}", self.prompt_hash(), self.decoding.label(), self.sample_index)
    }
}

/// Hex SHA-256 of the prompt text.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Cuts `text` before the earliest occurrence of any stop marker.
pub fn truncate_at_stop(text: &str, stop_markers: &[String]) -> String {
    let cut = stop_markers
        .iter()
        .filter(|m| !m.is_empty())
        .filter_map(|m| text.find(m.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

pub trait Generator: Send + Sync {
    /// Raw continuation for the request; stop markers may or may not be honored.
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let text = self.complete(request)?;
        Ok(truncate_at_stop(&text, &request.stop_markers))
    }
}

impl<G: Generator + ?Sized> Generator for &G {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<G: Generator + ?Sized> Generator for Box<G> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentRequest {
    pub premise: String,
    pub hypothesis: String,
}

impl EntailmentRequest {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        EntailmentRequest {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.premise.trim().is_empty() || self.hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidRequest("premise and hypothesis must be non-empty".into()));
        }
        Ok(())
    }
}

/// The three NLI class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliProbabilities {
    pub p_entail: f64,
    pub p_neutral: f64,
    pub p_contradict: f64,
}

impl NliProbabilities {
    /// `p_entail` with the remaining mass split evenly.
    pub fn from_entail(p_entail: f64) -> Self {
        let rest = (1.0 - p_entail) / 2.0;
        NliProbabilities {
            p_entail,
            p_neutral: rest,
            p_contradict: rest,
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        for (name, p) in [
            ("p_entail", self.p_entail),
            ("p_neutral", self.p_neutral),
            ("p_contradict", self.p_contradict),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::Protocol(format!("{name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntailmentLabel {
    Entailed,
    Neutral,
    Contradicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentScore {
    pub p_entail: f64,
    pub p_neutral: f64,
    pub p_contradict: f64,
    pub label: EntailmentLabel,
}

impl EntailmentScore {
    /// Entailed iff `p_entail >= threshold`; otherwise the larger of the
    /// neutral and contradiction probabilities decides.
    pub fn classify(p: NliProbabilities, threshold: f64) -> Self {
        let label = if p.p_entail >= threshold {
            EntailmentLabel::Entailed
        } else if p.p_contradict > p.p_neutral {
            EntailmentLabel::Contradicted
        } else {
            EntailmentLabel::Neutral
        };
        EntailmentScore {
            p_entail: p.p_entail,
            p_neutral: p.p_neutral,
            p_contradict: p.p_contradict,
            label,
        }
    }

    pub fn is_entailed(&self) -> bool {
        self.label == EntailmentLabel::Entailed
    }
}

pub trait EntailmentModel: Send + Sync {
    fn probabilities(&self, request: &EntailmentRequest) -> Result<NliProbabilities, BackendError>;

    fn entail(&self, request: &EntailmentRequest, threshold: f64) -> Result<EntailmentScore, BackendError> {
        request.validate()?;
        let p = self.probabilities(request)?;
        p.validate()?;
        Ok(EntailmentScore::classify(p, threshold))
    }
}

impl<E: EntailmentModel + ?Sized> EntailmentModel for &E {
    fn probabilities(&self, request: &EntailmentRequest) -> Result<NliProbabilities, BackendError> {
        (**self).probabilities(request)
    }
}

impl<E: EntailmentModel + ?Sized> EntailmentModel for Box<E> {
    fn probabilities(&self, request: &EntailmentRequest) -> Result<NliProbabilities, BackendError> {
        (**self).probabilities(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncates_before_first_marker() {
        let stops = vec!["\n#".to_string(), "\nFollow up:".to_string()];
        assert_eq!(truncate_at_stop("answer\nFollow up: x\n#", &stops), "answer");
        assert_eq!(truncate_at_stop("a\n#\nb", &stops), "a");
        assert_eq!(truncate_at_stop("plain", &stops), "plain");
    }

    #[test]
    fn threshold_is_inclusive() {
        let at = EntailmentScore::classify(NliProbabilities::from_entail(0.5), 0.5);
        assert!(at.is_entailed());
        let below = EntailmentScore::classify(NliProbabilities::from_entail(0.49), 0.5);
        assert!(!below.is_entailed());
        let strong = EntailmentScore::classify(NliProbabilities::from_entail(0.9), 0.5);
        assert!(strong.is_entailed());
    }

    #[test]
    fn non_entailed_label_follows_larger_class() {
        let p = NliProbabilities {
            p_entail: 0.1,
            p_neutral: 0.2,
            p_contradict: 0.7,
        };
        assert_eq!(EntailmentScore::classify(p, 0.5).label, EntailmentLabel::Contradicted);
    }

    #[test]
    fn sampled_requests_need_positive_temperature() {
        let mut r = GenerationRequest::greedy("p", &[]);
        r.decoding = Decoding::Sampled { temperature: 0.0 };
        assert!(r.validate().is_err());
        r.decoding = Decoding::Sampled { temperature: 0.7 };
        assert!(r.validate().is_ok());
        assert_eq!(r.decoding.label(), "t=0.7000");
    }

    #[test]
    fn empty_entailment_inputs_rejected() {
        assert!(EntailmentRequest::new("", "h").validate().is_err());
        assert!(EntailmentRequest::new("p", " ").validate().is_err());
    }
}

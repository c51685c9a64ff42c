//! Experiment configuration: one TOML file, overridable by flags.
//!
//! ```toml
//! dataset = "nq"
//! dataset_file = "data/nq.jsonl"
//! index = "data/nq-index.jsonl"
//! prompts_dir = "prompts/nq"      # optional for nq
//! variant = "sa-r@1"
//! tier = "top1"                   # top1 | lowrank | random | mix
//! no_retrieval = false
//! nli_gate = false
//! threshold = 0.5
//! seed = 0
//! jobs = 8
//! eval_size = 500                 # optional subsample
//! out = "runs/nq-r1.jsonl"
//!
//! [generator]
//! url = "http://localhost:8000"   # or: transcript = "transcripts/gen.jsonl"
//! api_key_env = "GEN_API_KEY"
//! record_transcript = "transcripts/gen.jsonl"
//!
//! [nli]
//! transcript = "transcripts/nli.jsonl"
//! default_p_entail = 0.0
//!
//! [datagen]
//! kind = "multi-hop"              # single-hop | multi-hop
//! mode = "self-consistency"       # or gold-intermediate
//! budget = 500
//! out_dir = "corpus/"
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use robust_ralm::backends::HttpSettings;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: Option<String>,
    pub dataset_file: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub variant: Option<String>,
    pub tier: Option<String>,
    pub no_retrieval: Option<bool>,
    pub nli_gate: Option<bool>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub eval_size: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub generator: BackendConfig,
    #[serde(default)]
    pub nli: BackendConfig,
    #[serde(default)]
    pub datagen: DatagenSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub url: Option<String>,
    pub transcript: Option<PathBuf>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub inflight_limit: Option<usize>,
    pub record_transcript: Option<PathBuf>,
    /// Entailment probability for pairs missing from an NLI transcript.
    pub default_p_entail: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub kind: Option<String>,
    pub mode: Option<String>,
    pub budget: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.dataset_file,
            &mut cfg.index,
            &mut cfg.prompts_dir,
            &mut cfg.out,
            &mut cfg.generator.transcript,
            &mut cfg.generator.record_transcript,
            &mut cfg.nli.transcript,
            &mut cfg.datagen.out_dir,
        ] {
            resolve(base, p);
        }
        Ok(cfg)
    }
}

impl BackendConfig {
    /// Problems with this section, prefixed by `name`.
    pub fn problems(&self, name: &str, required: bool) -> Vec<String> {
        let mut out = Vec::new();
        match (&self.url, &self.transcript) {
            (Some(_), Some(_)) => out.push(format!("[{name}] set either url or transcript, not both")),
            (None, None) if required => out.push(format!("[{name}] needs url or transcript")),
            _ => {}
        }
        if let Some(t) = &self.transcript {
            if !t.is_file() {
                out.push(format!("[{name}] transcript not found: {}", t.display()));
            }
        }
        if let Some(var) = &self.api_key_env {
            if std::env::var(var).is_err() {
                out.push(format!("[{name}] environment variable {var} is not set"));
            }
        }
        if let Some(p) = self.default_p_entail {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("[{name}] default_p_entail {p} outside [0, 1]"));
            }
        }
        out
    }

    pub fn http_settings(&self) -> Option<HttpSettings> {
        let url = self.url.as_ref()?;
        let mut s = HttpSettings::new(url.clone());
        s.api_key = self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
        if let Some(t) = self.timeout_secs {
            s.timeout = Duration::from_secs(t);
        }
        if let Some(n) = self.inflight_limit {
            s.inflight_limit = n;
        }
        Some(s)
    }
}

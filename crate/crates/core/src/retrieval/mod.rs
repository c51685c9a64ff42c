//! Snapshot retrieval and the three-tier noise policy.
//!
//! The pipeline never calls a live search engine. Results are snapshotted
//! into an index file by [`build::build_index`] and read back here. Noise is
//! injected by choosing which stored result to return:
//!
//! * `Top1` - the rank-1 result for the query.
//! * `LowRank` - the last (lowest-ranked) stored result for the query.
//! * `Random` - the rank-1 result of a *different* query in the same index.

pub mod build;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::types::{EvidenceSnippet, Tier};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("retrieval cache miss for query `{0}`")]
    CacheMiss(String),
    #[error("query `{query}` has {hits} result(s); a low-ranked result needs at least 2")]
    LowRankUnavailable { query: String, hits: usize },
    #[error("random-context pool has {0} snippet(s); at least 2 are required")]
    PoolTooSmall(usize),
    #[error("index {path}: {message}")]
    Index { path: String, message: String },
}

/// How the tier of each retrieval call is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoiseMode {
    #[serde(rename = "top1")]
    AlwaysTop1,
    #[serde(rename = "lowrank")]
    AlwaysLowRank,
    #[serde(rename = "random")]
    AlwaysRandom,
    /// Each call independently draws a tier with probability 1/3.
    #[serde(rename = "mix")]
    UniformMix,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::AlwaysTop1 => "top1",
            NoiseMode::AlwaysLowRank => "lowrank",
            NoiseMode::AlwaysRandom => "random",
            NoiseMode::UniformMix => "mix",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "top1" | "@1" => Ok(NoiseMode::AlwaysTop1),
            "lowrank" | "low-rank" | "@10" => Ok(NoiseMode::AlwaysLowRank),
            "random" => Ok(NoiseMode::AlwaysRandom),
            "mix" | "uniform-mix" => Ok(NoiseMode::UniformMix),
            other => Err(format!("unknown tier `{other}` (expected top1, lowrank, random, mix)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePolicy {
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoisePolicy {
    pub fn new(mode: NoiseMode, seed: u64) -> Self {
        NoisePolicy { mode, seed }
    }

    /// Independent stream for retrieval call `call_index` of `example_id`.
    pub fn rng_for(&self, example_id: &str, call_index: u64) -> Rng {
        rng::stream(self.seed, example_id, call_index)
    }
}

pub fn draw_tier(mode: NoiseMode, rng: &mut Rng) -> Tier {
    match mode {
        NoiseMode::AlwaysTop1 => Tier::Top1,
        NoiseMode::AlwaysLowRank => Tier::LowRank,
        NoiseMode::AlwaysRandom => Tier::Random,
        NoiseMode::UniformMix => Tier::ALL[rng::uniform_index(rng, Tier::ALL.len())],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corpus {
    /// Web search restricted to Wikipedia by a site prefix.
    Web,
    Local,
}

impl FromStr for Corpus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "web" => Ok(Corpus::Web),
            "local" => Ok(Corpus::Local),
            other => Err(format!("unknown corpus `{other}` (expected web or local)")),
        }
    }
}

/// Search query for a question: `en.wikipedia.org {question}` with collapsed
/// whitespace for web search, the question unchanged for a local corpus.
pub fn format_query(question: &str, corpus: Corpus) -> String {
    match corpus {
        Corpus::Web => {
            let words: Vec<&str> = question.split_whitespace().collect();
            format!("en.wikipedia.org {}", words.join(" "))
        }
        Corpus::Local => question.to_string(),
    }
}

/// Lookup key: the query with whitespace collapsed.
pub fn query_key(query: &str) -> String {
    query.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One line of an index file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub query: String,
    pub rank: u32,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, tier: Tier, rng: &mut Rng) -> Result<EvidenceSnippet, RetrievalError>;
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn retrieve(&self, query: &str, tier: Tier, rng: &mut Rng) -> Result<EvidenceSnippet, RetrievalError> {
        (**self).retrieve(query, tier, rng)
    }
}

/// A retriever with no evidence at all, for runs without retrieval.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRetrieval;

impl Retriever for NoRetrieval {
    fn retrieve(&self, query: &str, _tier: Tier, _rng: &mut Rng) -> Result<EvidenceSnippet, RetrievalError> {
        Err(RetrievalError::CacheMiss(query.to_string()))
    }
}

/// Read-only snapshot of ranked results per query plus the pool of rank-1
/// snippets used for random contexts.
#[derive(Debug, Clone, Default)]
pub struct RetrievalIndex {
    lists: BTreeMap<String, Vec<EvidenceSnippet>>,
    /// Rank-1 snippets ordered by query key.
    pool: Vec<(String, EvidenceSnippet)>,
}

const DEFAULT_SOURCE: &str = "index";

impl RetrievalIndex {
    pub fn from_records(records: impl IntoIterator<Item = IndexRecord>) -> Result<Self, String> {
        let mut lists: BTreeMap<String, Vec<EvidenceSnippet>> = BTreeMap::new();
        for r in records {
            if r.text.trim().is_empty() {
                return Err(format!("empty text for query `{}` rank {}", r.query, r.rank));
            }
            if r.rank == 0 {
                return Err(format!("rank 0 for query `{}`; ranks start at 1", r.query));
            }
            lists.entry(query_key(&r.query)).or_default().push(EvidenceSnippet {
                query: r.query,
                rank: r.rank,
                title: r.title,
                text: r.text,
                tier: Tier::Top1,
                source: r.source.unwrap_or_else(|| DEFAULT_SOURCE.to_string()),
            });
        }
        let mut pool = Vec::new();
        for (key, list) in lists.iter_mut() {
            list.sort_by_key(|s| s.rank);
            if list.windows(2).any(|w| w[0].rank == w[1].rank) {
                return Err(format!("duplicate rank for query `{key}`"));
            }
            if list[0].rank != 1 {
                return Err(format!("query `{key}` has no rank-1 result"));
            }
            pool.push((key.clone(), list[0].clone()));
        }
        Ok(RetrievalIndex { lists, pool })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let err = |message: String| RetrievalError::Index {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: IndexRecord = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Self::from_records(records).map_err(err)
    }

    pub fn contains(&self, query: &str) -> bool {
        self.lists.contains_key(&query_key(query))
    }

    pub fn results(&self, query: &str) -> Option<&[EvidenceSnippet]> {
        self.lists.get(&query_key(query)).map(Vec::as_slice)
    }

    pub fn query_count(&self) -> usize {
        self.lists.len()
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    /// Mean rank of the lowest stored result over queries with at least two results.
    pub fn average_low_rank(&self) -> Option<f64> {
        let lows: Vec<f64> = self
            .lists
            .values()
            .filter(|l| l.len() >= 2)
            .map(|l| f64::from(l.last().expect("non-empty").rank))
            .collect();
        (!lows.is_empty()).then(|| lows.iter().sum::<f64>() / lows.len() as f64)
    }

    fn random_from_pool(&self, query: &str, rng: &mut Rng) -> Result<EvidenceSnippet, RetrievalError> {
        if self.pool.len() <= 1 {
            return Err(RetrievalError::PoolTooSmall(self.pool.len()));
        }
        let key = query_key(query);
        let excluded = self.pool.binary_search_by(|(k, _)| k.as_str().cmp(&key)).ok();
        let candidates = self.pool.len() - usize::from(excluded.is_some());
        let mut j = rng::uniform_index(rng, candidates);
        if let Some(e) = excluded {
            if j >= e {
                j += 1;
            }
        }
        Ok(self.pool[j].1.clone())
    }
}

impl Retriever for RetrievalIndex {
    fn retrieve(&self, query: &str, tier: Tier, rng: &mut Rng) -> Result<EvidenceSnippet, RetrievalError> {
        let mut snippet = match tier {
            Tier::Top1 => self
                .results(query)
                .ok_or_else(|| RetrievalError::CacheMiss(query.to_string()))?[0]
                .clone(),
            Tier::LowRank => {
                let list = self
                    .results(query)
                    .ok_or_else(|| RetrievalError::CacheMiss(query.to_string()))?;
                if list.len() < 2 {
                    return Err(RetrievalError::LowRankUnavailable {
                        query: query.to_string(),
                        hits: list.len(),
                    });
                }
                list.last().expect("non-empty").clone()
            }
            Tier::Random => {
                if !self.contains(query) {
                    return Err(RetrievalError::CacheMiss(query.to_string()));
                }
                self.random_from_pool(query, rng)?
            }
        };
        snippet.tier = tier;
        Ok(snippet)
    }
}

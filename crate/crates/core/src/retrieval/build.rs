//! Snapshotting live search results into an index file.
//!
//! Search wire contract:
//!
//! ```text
//! POST {base}/search  {"query": "en.wikipedia.org who sang ...", "num": 10}
//!                  -> {"results": [{"title": "...", "text": "..."}, ...]}
//! ```
//!
//! Results are ranked by their position in the response, starting at 1.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{format_query, query_key, Corpus, IndexRecord};
use crate::backends::http::JsonClient;
use crate::backends::{BackendError, HttpSettings};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub text: String,
}

pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError>;
}

impl<F> SearchBackend for F
where
    F: Fn(&str, usize) -> Result<Vec<SearchHit>, BackendError> + Send + Sync,
{
    fn search(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError> {
        self(query, num)
    }
}

#[derive(Serialize)]
struct SearchBody<'a> {
    query: &'a str,
    num: usize,
}

#[derive(Deserialize)]
struct SearchResponse {
    results: Vec<SearchHit>,
}

pub struct HttpSearch {
    client: JsonClient,
}

impl HttpSearch {
    pub fn new(settings: HttpSettings) -> Self {
        HttpSearch {
            client: JsonClient::new(settings),
        }
    }
}

impl SearchBackend for HttpSearch {
    fn search(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError> {
        let resp: SearchResponse = self.client.post("/search", &SearchBody { query, num })?;
        Ok(resp.results)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query: String,
    pub error: String,
}

/// Summary written next to the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexBuildReport {
    pub queries: usize,
    pub indexed: usize,
    pub hit_counts: BTreeMap<String, usize>,
    /// Queries with a single result, for which no low-ranked context exists.
    pub lowrank_unavailable: Vec<String>,
    pub failures: Vec<QueryFailure>,
    pub average_low_rank: Option<f64>,
    /// True when at least one query could not be indexed.
    pub partial: bool,
}

/// Questions file: one question per line, either plain text or a JSON object
/// with a `question` field (dataset records work as-is).
pub fn parse_questions(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(t).map_err(|e| format!("line {}: {e}", i + 1))?;
            let q = v
                .get("question")
                .and_then(|q| q.as_str())
                .ok_or_else(|| format!("line {}: missing `question`", i + 1))?;
            out.push(q.to_string());
        } else {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

/// Queries the backend once per distinct question. Failed queries are
/// reported and left out; the remaining records form a usable partial index.
pub fn build_index(
    questions: &[String],
    backend: &dyn SearchBackend,
    corpus: Corpus,
    num: usize,
    source: &str,
) -> (Vec<IndexRecord>, IndexBuildReport) {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut hit_counts = BTreeMap::new();
    let mut lowrank_unavailable = Vec::new();
    let mut failures = Vec::new();
    let mut low_ranks = Vec::new();

    for question in questions {
        let key = query_key(question);
        if key.is_empty() || !seen.insert(key.clone()) {
            continue;
        }
        let hits = match backend.search(&format_query(question, corpus), num) {
            Ok(hits) => hits,
            Err(e) => {
                warn!(query = %key, error = %e, "search failed");
                failures.push(QueryFailure {
                    query: key,
                    error: e.to_string(),
                });
                continue;
            }
        };
        let hits: Vec<SearchHit> = hits.into_iter().filter(|h| !h.text.trim().is_empty()).take(num).collect();
        if hits.is_empty() {
            failures.push(QueryFailure {
                query: key,
                error: "no results".into(),
            });
            continue;
        }
        hit_counts.insert(key.clone(), hits.len());
        if hits.len() < 2 {
            lowrank_unavailable.push(key.clone());
        } else {
            low_ranks.push(hits.len() as f64);
        }
        records.extend(hits.into_iter().enumerate().map(|(i, h)| IndexRecord {
            query: key.clone(),
            rank: i as u32 + 1,
            title: h.title,
            text: h.text,
            source: Some(source.to_string()),
        }));
    }

    let report = IndexBuildReport {
        queries: seen.len(),
        indexed: hit_counts.len(),
        average_low_rank: (!low_ranks.is_empty()).then(|| low_ranks.iter().sum::<f64>() / low_ranks.len() as f64),
        partial: !failures.is_empty(),
        hit_counts,
        lowrank_unavailable,
        failures,
    };
    (records, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RetrievalIndex;

    fn stub(hits: usize) -> impl Fn(&str, usize) -> Result<Vec<SearchHit>, BackendError> + Send + Sync {
        move |q: &str, _| {
            Ok((1..=hits)
                .map(|i| SearchHit {
                    title: format!("{q} {i}"),
                    text: format!("body {i}"),
                })
                .collect())
        }
    }

    #[test]
    fn ten_hits_give_ranks_one_to_ten() {
        let qs = vec!["a b".to_string(), "c".to_string()];
        let (records, report) = build_index(&qs, &stub(10), Corpus::Web, 10, "stub");
        assert_eq!(records.len(), 20);
        assert_eq!(report.average_low_rank, Some(10.0));
        assert!(!report.partial);
        let idx = RetrievalIndex::from_records(records).unwrap();
        let ranks: Vec<u32> = idx.results("a b").unwrap().iter().map(|s| s.rank).collect();
        assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn web_queries_are_prefixed() {
        let seen = std::sync::Mutex::new(Vec::new());
        let backend = |q: &str, _: usize| {
            seen.lock().unwrap().push(q.to_string());
            Ok(vec![SearchHit {
                title: "t".into(),
                text: "x".into(),
            }])
        };
        build_index(&["who  is".to_string()], &backend, Corpus::Web, 10, "s");
        assert_eq!(seen.lock().unwrap().as_slice(), ["en.wikipedia.org who is"]);
    }

    #[test]
    fn single_hit_is_flagged() {
        let (_, report) = build_index(&["q".to_string()], &stub(1), Corpus::Local, 10, "stub");
        assert_eq!(report.lowrank_unavailable, vec!["q".to_string()]);
        assert_eq!(report.average_low_rank, None);
    }

    #[test]
    fn failures_make_a_partial_index() {
        let backend = |q: &str, _: usize| {
            if q == "bad" {
                Err(BackendError::Transport("down".into()))
            } else {
                Ok(vec![SearchHit {
                    title: "t".into(),
                    text: "x".into(),
                }])
            }
        };
        let (records, report) = build_index(&["ok".into(), "bad".into()], &backend, Corpus::Local, 10, "s");
        assert_eq!(records.len(), 1);
        assert!(report.partial);
        assert_eq!(report.failures[0].query, "bad");
    }

    #[test]
    fn questions_file_accepts_plain_and_json_lines() {
        let qs = parse_questions("plain question\n\n{\"id\":\"1\",\"question\":\"json one\"}\n").unwrap();
        assert_eq!(qs, vec!["plain question", "json one"]);
        assert!(parse_questions("{\"id\":1}").is_err());
    }
}

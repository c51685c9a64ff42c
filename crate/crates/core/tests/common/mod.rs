//! Fixtures shared by integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use robust_ralm::backends::{BackendError, Decoding, FnGenerator, GenerationRequest};
use robust_ralm::retrieval::{IndexRecord, RetrievalError, RetrievalIndex, Retriever};
use robust_ralm::rng::Rng;
use robust_ralm::{DatasetId, EvidenceSnippet, QaExample, Tier};

pub fn example(id: &str, question: &str, gold: &str, dataset: DatasetId) -> QaExample {
    QaExample {
        id: id.into(),
        question: question.into(),
        gold_answers: vec![gold.into()],
        intermediate_answers: None,
        measure_unit: (dataset == DatasetId::Fermi).then(|| "meters".to_string()),
        dataset,
    }
}

/// `hits` results per query; rank r has text `"{query} evidence {r}"`.
pub fn index_records(queries: &[String], hits: u32) -> Vec<IndexRecord> {
    queries
        .iter()
        .flat_map(|q| {
            (1..=hits).map(move |rank| IndexRecord {
                query: q.clone(),
                rank,
                title: format!("About {q}"),
                text: format!("{q} evidence {rank}"),
                source: None,
            })
        })
        .collect()
}

pub fn index_for(queries: &[String], hits: u32) -> RetrievalIndex {
    RetrievalIndex::from_records(index_records(queries, hits)).unwrap()
}

/// Counts calls before delegating.
pub struct CountingRetriever<R> {
    pub inner: R,
    pub calls: AtomicUsize,
}

impl<R: Retriever> CountingRetriever<R> {
    pub fn new(inner: R) -> Self {
        CountingRetriever {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<R: Retriever> Retriever for CountingRetriever<R> {
    fn retrieve(&self, query: &str, tier: Tier, rng: &mut Rng) -> Result<EvidenceSnippet, RetrievalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.retrieve(query, tier, rng)
    }
}

pub const PHELPS_QUESTION: &str = "Did Colonel Walter Phelps serve in World War I?";
pub const PHELPS_FOLLOW_UP_1: &str = "Who is Colonel Walter Phelps?";
pub const PHELPS_ANSWER_1: &str =
    "Colonel Walter Phelps was an officer in the Union Army throughout the American Civil War.";
pub const PHELPS_FOLLOW_UP_2: &str = "When did the American Civil War end?";
pub const PHELPS_ANSWER_2: &str = "1865.";

/// The two-hop exchange as the controller sees it: open, answer, open,
/// answer, open.
pub fn phelps_continuations() -> Vec<String> {
    vec![
        format!("Are follow up questions needed here: Yes.\nFollow up: {PHELPS_FOLLOW_UP_1}"),
        format!(" {PHELPS_ANSWER_1}"),
        format!("Follow up: {PHELPS_FOLLOW_UP_2}"),
        format!(" {PHELPS_ANSWER_2}"),
        "So the final answer is: No".to_string(),
    ]
}

pub fn phelps_example() -> QaExample {
    example("phelps", PHELPS_QUESTION, "no", DatasetId::StrategyQa)
}

pub fn phelps_index() -> RetrievalIndex {
    let mut records = index_records(
        &[PHELPS_QUESTION.to_string(), PHELPS_FOLLOW_UP_1.to_string(), PHELPS_FOLLOW_UP_2.to_string()],
        10,
    );
    records.extend(index_records(&["An unrelated question?".to_string()], 10));
    RetrievalIndex::from_records(records).unwrap()
}

/// The text after the last `#` separator: contexts, question and the
/// decomposition so far.
pub fn query_block(prompt: &str) -> &str {
    prompt.rsplit("\n#\n").next().unwrap_or(prompt)
}

pub fn block_question(block: &str) -> String {
    block
        .lines()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or_default()
        .to_string()
}

pub fn block_contexts(block: &str) -> Vec<String> {
    block
        .lines()
        .take_while(|l| !l.starts_with("Question: "))
        .filter_map(|l| l.split_once(": ").map(|(_, rest)| rest.to_string()))
        .collect()
}

/// A deterministic decomposer for multi-hop fixtures. Question `q` is
/// answered with `hops` follow-ups `"{q} part {k}?"`, each answered
/// `"answer {k} for {q}"`, and the final answer `gold[q]`, except for
/// `(question, sample_index)` pairs in `wrong`, which end in `"wrong"`.
pub fn multi_hop_generator(
    gold: HashMap<String, String>,
    hops: HashMap<String, usize>,
    wrong: HashSet<(String, u32)>,
) -> FnGenerator {
    FnGenerator::new(move |req: &GenerationRequest| {
        let block = query_block(&req.prompt);
        let q = block_question(block);
        let gold = gold
            .get(&q)
            .ok_or_else(|| BackendError::TranscriptMiss(format!("no script for {q}")))?;
        let sample = match req.decoding {
            Decoding::Greedy => 0,
            Decoding::Sampled { .. } => req.sample_index,
        };
        let asked = block.matches("\nFollow up: ").count();
        if block.ends_with("Intermediate answer:") {
            return Ok(format!(" answer {asked} for {q}"));
        }
        let n = hops.get(&q).copied().unwrap_or(2);
        if asked < n {
            let prefix = if asked == 0 { "Are follow up questions needed here: Yes.\n" } else { "" };
            return Ok(format!("{prefix}Follow up: {q} part {}?", asked + 1));
        }
        if wrong.contains(&(q.clone(), sample)) {
            Ok("So the final answer is: wrong".into())
        } else {
            Ok(format!("So the final answer is: {gold}"))
        }
    })
}

/// All queries a [`multi_hop_generator`] decomposition retrieves for.
pub fn multi_hop_queries(question: &str, hops: usize) -> Vec<String> {
    std::iter::once(question.to_string())
        .chain((1..=hops).map(|k| format!("{question} part {k}?")))
        .collect()
}

/// A single-hop generator that copies the first entity of the first context
/// (the text before ` is `) and otherwise answers from memory.
pub fn context_copying_generator(memory: HashMap<String, String>) -> FnGenerator {
    FnGenerator::new(move |req: &GenerationRequest| {
        let block = query_block(&req.prompt);
        let q = block_question(block);
        let answer = match block_contexts(block).first() {
            Some(ctx) => {
                let text = ctx.split_once(": ").map_or(ctx.as_str(), |(_, t)| t);
                text.split(" is ").next().unwrap_or(text).to_string()
            }
            None => memory
                .get(&q)
                .cloned()
                .ok_or_else(|| BackendError::TranscriptMiss(format!("no memory for {q}")))?,
        };
        Ok(format!("Are follow up questions needed here: No.\nSo the final answer is: {answer}"))
    })
}

/// One request seen by a [`StubServer`].
#[derive(Debug, Clone)]
pub struct StubRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: serde_json::Value,
}

type StubHandler = dyn Fn(&StubRequest) -> (u16, String) + Send + Sync;

/// A minimal HTTP/1.1 server on a loopback port. Every response closes its
/// connection. The thread lives until the process exits.
pub struct StubServer {
    pub url: String,
    pub requests: std::sync::Arc<std::sync::Mutex<Vec<StubRequest>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&StubRequest) -> (u16, String) + Send + Sync + 'static) -> Self {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen = requests.clone();
        let handler: Box<StubHandler> = Box::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() {
                    continue;
                }
                let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
                let mut length = 0usize;
                let mut authorization = None;
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).unwrap_or(0) == 0 || h.trim().is_empty() {
                        break;
                    }
                    if let Some((name, value)) = h.split_once(':') {
                        match name.trim().to_ascii_lowercase().as_str() {
                            "content-length" => length = value.trim().parse().unwrap_or(0),
                            "authorization" => authorization = Some(value.trim().to_string()),
                            _ => {}
                        }
                    }
                }
                let mut body = vec![0u8; length];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                let req = StubRequest {
                    path,
                    authorization,
                    body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
                };
                let (status, text) = handler(&req);
                seen.lock().unwrap().push(req);
                let reply = format!(
                    "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        StubServer { url, requests }
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().unwrap().clone()
    }
}

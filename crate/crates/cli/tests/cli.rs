#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use robust_ralm::backends::RecordingGenerator;
use robust_ralm::controller::Controller;
use robust_ralm::dataset::{read_jsonl, write_dataset, write_jsonl};
use robust_ralm::retrieval::{IndexRecord, NoiseMode, NoisePolicy};
use robust_ralm::selfask::{PromptSet, VariantKind};
use robust_ralm::{DatasetId, QaExample, RunRecord};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robust-ralm"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Ten NQ questions, an index for them and a generator transcript covering
/// top-1 runs with and without retrieval.
fn workspace(dir: &Path) -> Vec<QaExample> {
    let examples: Vec<QaExample> = (0..10)
        .map(|i| example(&format!("n{i}"), &format!("who painted picture {i}"), &format!("Painter{i}"), DatasetId::NaturalQuestions))
        .collect();
    let queries: Vec<String> = examples.iter().map(|e| e.question.clone()).collect();
    let mut records = index_records(&queries, 10);
    for r in records.iter_mut().filter(|r| r.rank == 1) {
        let i = r.query.rsplit(' ').next().unwrap();
        r.text = format!("Painter{i} is known for picture {i}.");
    }
    write_dataset(&dir.join("q.jsonl"), &examples).unwrap();
    write_jsonl(&dir.join("index.jsonl"), &records).unwrap();

    // Memory is right for even-numbered questions only.
    let memory: HashMap<String, String> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.clone(), if i % 2 == 0 { format!("Painter{i}") } else { "Nobody".into() }))
        .collect();
    let recorder = RecordingGenerator::new(context_copying_generator(memory));
    let index = robust_ralm::retrieval::RetrievalIndex::from_records(records).unwrap();
    let set = PromptSet::builtin_nq();
    let policy = NoisePolicy::new(NoiseMode::AlwaysTop1, 0);
    let ctl = Controller::new(&recorder, &index);
    for ex in &examples {
        ctl.answer_question(ex, &set.variant(VariantKind::SaR1).unwrap(), &policy, true).unwrap();
        ctl.answer_question(ex, &set.variant(VariantKind::SaNr).unwrap(), &policy, false).unwrap();
    }
    recorder.write(&dir.join("gen.jsonl")).unwrap();
    examples
}

fn run_args(dir: &Path) -> Vec<String> {
    ["run", "--dataset", "nq", "--dataset-file", "q.jsonl", "--index", "index.jsonl", "--generator-transcript", "gen.jsonl"]
        .iter()
        .map(|a| if a.ends_with(".jsonl") { dir.join(a).display().to_string() } else { a.to_string() })
        .collect()
}

#[test]
fn missing_index_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let missing = dir.path().join("nowhere.jsonl");
    let mut args = run_args(dir.path());
    args[6] = missing.display().to_string();
    let out = bin()
        .args(args)
        .arg("--out")
        .arg(dir.path().join("r.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains(&format!("index file not found: {}", missing.display())), "{}", stderr(&out));
}

#[test]
fn config_problems_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "dataset = \"trivia\"\ndataset_file = \"absent.jsonl\"\nvariant = \"sa-x\"\nthreshold = 1.5\n",
    )
    .unwrap();
    let out = bin().args(["run", "--config"]).arg(dir.path().join("bad.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("invalid configuration:"), "{err}");
    for needle in ["unknown dataset", "absent.jsonl", "unknown prompt variant", "threshold 1.5", "out is required"] {
        assert!(err.contains(needle), "missing `{needle}` in {err}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "datset = \"nq\"\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(dir.path().join("c.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("datset"), "{}", stderr(&out));
}

#[test]
fn config_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    fs::write(
        dir.path().join("run.toml"),
        "dataset = \"nq\"\ndataset_file = \"q.jsonl\"\nindex = \"index.jsonl\"\nout = \"runs/r1.jsonl\"\n\n[generator]\ntranscript = \"gen.jsonl\"\n",
    )
    .unwrap();
    let out = bin().args(["run", "--config"]).arg(dir.path().join("run.toml")).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let records: Vec<RunRecord> = read_jsonl(&dir.path().join("runs/r1.jsonl")).unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().all(|r| r.score == 1.0 && r.trace.used_retrieval));
    assert!(dir.path().join("runs/r1.events.jsonl").is_file());
}

#[test]
fn no_retrieval_runs_and_report_computes_deltas() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let p = dir.path();
    let nr = bin()
        .args(run_args(p))
        .args(["--variant", "sa-nr", "--no-retrieval", "--out"])
        .arg(p.join("nr.jsonl"))
        .output()
        .unwrap();
    assert!(nr.status.success(), "{}", stderr(&nr));
    let records: Vec<RunRecord> = read_jsonl(&p.join("nr.jsonl")).unwrap();
    assert!(records.iter().all(|r| !r.trace.used_retrieval && r.noise_tier.is_none()));
    let nr_mean: f64 = records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64;
    assert_eq!(nr_mean, 0.5);

    let r1 = bin().args(run_args(p)).arg("--out").arg(p.join("r1.jsonl")).output().unwrap();
    assert!(r1.status.success(), "{}", stderr(&r1));

    let report = bin()
        .arg("report")
        .arg(p.join("nr.jsonl"))
        .arg(p.join("r1.jsonl"))
        .arg("--out-dir")
        .arg(p.join("report"))
        .output()
        .unwrap();
    assert!(report.status.success(), "{}", stderr(&report));
    let csv = fs::read_to_string(p.join("report/deltas.csv")).unwrap();
    assert_eq!(csv, "dataset,variant,tier,baseline,treated,delta\nnq,sa-r@1,top1,50.0,100.0,50.0\n");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("report/report.json")).unwrap()).unwrap();
    assert_eq!(json["aggregates"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_transcript_entry_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let out = bin()
        .args(run_args(dir.path()))
        .args(["--tier", "lowrank", "--out"])
        .arg(dir.path().join("r.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn gendata_budget_caps_single_hop_corpus() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let p = dir.path();
    let mut args = run_args(p);
    args[0] = "gendata".into();
    let status = bin()
        .args(args)
        .args(["--tier", "top1", "--budget", "4", "--out-dir"])
        .arg(p.join("corpus"))
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", stderr(&status));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("corpus/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "single-hop");
    assert_eq!(manifest["budget"]["max_questions_single_hop"], 4);
    assert_eq!(manifest["examples"], 4);
    let corpus = fs::read_to_string(p.join("corpus/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 4);
    assert!(corpus.contains("So the final answer is: Painter0"));
}

#[test]
fn build_index_snapshots_a_search_service() {
    let server = StubServer::start(|req| {
        let q = req.body["query"].as_str().unwrap_or_default().to_string();
        let n = if q.contains("obscure") { 1 } else { 10 };
        let results: Vec<_> = (1..=n)
            .map(|i| serde_json::json!({"title": format!("Page {i}"), "text": format!("{q} result {i}")}))
            .collect();
        (200, serde_json::json!({ "results": results }).to_string())
    });
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("questions.txt"), "who wrote hamlet\nan obscure question\n").unwrap();
    let out = bin()
        .args(["build-index", "--questions"])
        .arg(p.join("questions.txt"))
        .args(["--backend-url", &server.url, "--out"])
        .arg(p.join("idx.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let records: Vec<IndexRecord> = read_jsonl(&p.join("idx.jsonl")).unwrap();
    let ranks: Vec<u32> = records.iter().filter(|r| r.query == "who wrote hamlet").map(|r| r.rank).collect();
    assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
    assert!(server.requests()[0].body["query"].as_str().unwrap().starts_with("en.wikipedia.org"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("idx.report.json")).unwrap()).unwrap();
    assert_eq!(report["lowrank_unavailable"], serde_json::json!(["an obscure question"]));
}

#[test]
fn build_index_fails_when_nothing_is_indexed() {
    let server = StubServer::start(|_| (400, "{}".into()));
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("q.txt"), "one\n").unwrap();
    let out = bin()
        .args(["build-index", "--questions"])
        .arg(dir.path().join("q.txt"))
        .args(["--backend-url", &server.url, "--out"])
        .arg(dir.path().join("idx.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

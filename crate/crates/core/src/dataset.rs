//! Line-delimited dataset files and evaluation subsets.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id":"q1","question":"...","gold_answers":["..."],"intermediate_answers":["..."],"measure_unit":"meters"}
//! ```
//!
//! `intermediate_answers` is only accepted for 2WikiMQA and `measure_unit` is
//! required for (and only for) Fermi. Blank lines are ignored.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::types::{DatasetId, QaExample};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

const REQUIRED_FIELDS: [&str; 3] = ["id", "question", "gold_answers"];

#[derive(Debug, Serialize, Deserialize)]
struct DatasetLine {
    id: String,
    question: String,
    gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intermediate_answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    measure_unit: Option<String>,
}

pub fn load_dataset(path: &Path, dataset: DatasetId) -> Result<Vec<QaExample>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, dataset)
}

pub fn parse_dataset(text: &str, dataset: DatasetId) -> Result<Vec<QaExample>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| DatasetError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| DatasetError::Malformed {
            line,
            message: "expected a JSON object".into(),
        })?;
        if let Some(field) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(DatasetError::MissingField { line, field });
        }
        let rec: DatasetLine = serde_json::from_value(value).map_err(|e| DatasetError::Malformed {
            line,
            message: e.to_string(),
        })?;
        out.push(validate(rec, dataset, line)?);
    }
    Ok(out)
}

fn validate(rec: DatasetLine, dataset: DatasetId, line: usize) -> Result<QaExample, DatasetError> {
    let invalid = |message: String| DatasetError::Invalid { line, message };
    if rec.id.trim().is_empty() {
        return Err(invalid("empty id".into()));
    }
    if rec.question.trim().is_empty() {
        return Err(invalid("empty question".into()));
    }
    if rec.gold_answers.is_empty() {
        return Err(invalid("empty gold_answers".into()));
    }
    if rec.intermediate_answers.is_some() && !dataset.has_intermediate_answers() {
        return Err(invalid(format!("intermediate_answers not allowed for dataset {dataset}")));
    }
    match (&rec.measure_unit, dataset) {
        (None, DatasetId::Fermi) => return Err(invalid("fermi records require measure_unit".into())),
        (Some(_), d) if d != DatasetId::Fermi => {
            return Err(invalid(format!("measure_unit not allowed for dataset {d}")))
        }
        _ => {}
    }
    Ok(QaExample {
        id: rec.id,
        question: rec.question,
        gold_answers: rec.gold_answers,
        intermediate_answers: rec.intermediate_answers,
        measure_unit: rec.measure_unit,
        dataset,
    })
}

/// Serializes examples in the dataset file format (one record per line).
pub fn serialize_dataset(examples: &[QaExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let line = DatasetLine {
            id: ex.id.clone(),
            question: ex.question.clone(),
            gold_answers: ex.gold_answers.clone(),
            intermediate_answers: ex.intermediate_answers.clone(),
            measure_unit: ex.measure_unit.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("dataset line serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, examples: &[QaExample]) -> std::io::Result<()> {
    fs::write(path, serialize_dataset(examples))
}

/// Draws `n` distinct examples (clamped to the population) with a partial
/// Fisher-Yates shuffle driven by `rng::from_seed(seed)`.
pub fn sample_eval_subset(examples: &[QaExample], n: usize, seed: u64) -> Vec<QaExample> {
    let k = n.min(examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng::from_seed(seed);
    for i in 0..k {
        let j = i + rng::uniform_index(&mut rng, order.len() - i);
        order.swap(i, j);
    }
    order[..k].iter().map(|&i| examples[i].clone()).collect()
}

/// Writes serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads JSON lines, reporting the 1-based line number of the first bad record.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_nq_record() {
        let text = r#"{"id":"q1","question":"who sang you got a friend in me from toy story","gold_answers":["Randy Newman"]}"#;
        let ex = parse_dataset(text, DatasetId::NaturalQuestions).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].gold_answers, vec!["Randy Newman".to_string()]);
        assert_eq!(ex[0].dataset, DatasetId::NaturalQuestions);
    }

    #[test]
    fn empty_input_gives_empty_list() {
        assert!(parse_dataset("", DatasetId::NaturalQuestions).unwrap().is_empty());
        assert!(parse_dataset("\n\n", DatasetId::NaturalQuestions).unwrap().is_empty());
    }

    #[test]
    fn empty_gold_answers_rejected() {
        let err = parse_dataset(r#"{"id":"a","question":"q","gold_answers":[]}"#, DatasetId::NaturalQuestions)
            .unwrap_err();
        assert!(err.to_string().contains("empty gold_answers"), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "{\"id\":\"a\",\"question\":\"q\",\"gold_answers\":[\"x\"]}\n{not json";
        match parse_dataset(text, DatasetId::NaturalQuestions).unwrap_err() {
            DatasetError::Malformed { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_dataset(r#"{"id":"a","gold_answers":["x"]}"#, DatasetId::NaturalQuestions).unwrap_err();
        assert!(matches!(err, DatasetError::MissingField { line: 1, field: "question" }));
        assert!(err.to_string().contains("question"));
    }

    #[test]
    fn measure_unit_only_for_fermi() {
        let fermi = r#"{"id":"f","question":"how many","gold_answers":["1e5"],"measure_unit":"meters"}"#;
        assert!(parse_dataset(fermi, DatasetId::Fermi).is_ok());
        assert!(parse_dataset(fermi, DatasetId::NaturalQuestions).is_err());
        let no_unit = r#"{"id":"f","question":"how many","gold_answers":["1e5"]}"#;
        assert!(parse_dataset(no_unit, DatasetId::Fermi).is_err());
    }

    #[test]
    fn intermediate_answers_only_for_2wiki() {
        let rec = r#"{"id":"w","question":"q","gold_answers":["a"],"intermediate_answers":["b"]}"#;
        assert!(parse_dataset(rec, DatasetId::TwoWikiMultiHop).is_ok());
        assert!(parse_dataset(rec, DatasetId::StrategyQa).is_err());
    }

    fn population(n: usize) -> Vec<QaExample> {
        (0..n)
            .map(|i| QaExample {
                id: format!("q{i}"),
                question: format!("question {i}"),
                gold_answers: vec![format!("a{i}")],
                intermediate_answers: None,
                measure_unit: None,
                dataset: DatasetId::NaturalQuestions,
            })
            .collect()
    }

    #[test]
    fn sampling_full_population_returns_everything() {
        let pop = population(10);
        let mut ids: Vec<_> = sample_eval_subset(&pop, 10, 7).into_iter().map(|e| e.id).collect();
        ids.sort();
        let mut all: Vec<_> = pop.iter().map(|e| e.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn sampling_clamps_and_is_deterministic() {
        let pop = population(1000);
        let a = sample_eval_subset(&pop, 500, 1);
        let b = sample_eval_subset(&pop, 500, 1);
        assert_eq!(a, b);
        let ids: std::collections::HashSet<_> = a.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), 500);
        assert_eq!(sample_eval_subset(&pop[..3], 10, 1).len(), 3);
    }

    #[test]
    fn different_seeds_give_different_subsets() {
        let pop = population(1000);
        let a: std::collections::HashSet<_> = sample_eval_subset(&pop, 500, 1).into_iter().map(|e| e.id).collect();
        let b: std::collections::HashSet<_> = sample_eval_subset(&pop, 500, 2).into_iter().map(|e| e.id).collect();
        assert!(a.symmetric_difference(&b).count() >= 1);
    }
}

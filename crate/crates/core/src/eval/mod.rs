//! Scoring, aggregation and robustness reports.

mod metrics;
mod report;

pub use metrics::{
    canonical_yes_no, exact_match, normalize_answer, order_of_magnitude_score, parse_quantity, token_f1,
    unit_matches,
};
pub use report::{
    aggregate, answer_in_context, entailment_buckets, robustness_report, AggregateRow, DeltaRow, RobustnessReport,
};

use thiserror::Error;

use crate::types::{DatasetId, DecompositionTrace, MetricKind, QaExample, RunRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("example {id}: {message}")]
    Config { id: String, message: String },
    #[error("record {record} is scored against example {example}")]
    Mismatch { record: String, example: String },
}

/// Metric value of a final answer against the example's references.
pub fn score_answer(answer: &str, example: &QaExample) -> Result<f64, EvalError> {
    let config = |message: String| EvalError::Config {
        id: example.id.clone(),
        message,
    };
    match example.dataset.metric() {
        MetricKind::ExactMatch if example.dataset == DatasetId::StrategyQa => {
            let golds: Vec<String> = example.gold_answers.iter().map(|g| canonical_yes_no(g)).collect();
            Ok(exact_match(&canonical_yes_no(answer), &golds))
        }
        MetricKind::ExactMatch => Ok(exact_match(answer, &example.gold_answers)),
        MetricKind::TokenF1 => Ok(token_f1(answer, &example.gold_answers)),
        MetricKind::OrderOfMagnitude => {
            let gold_text = example.gold_answers.first().ok_or_else(|| config("no gold answer".into()))?;
            let (gold, _) =
                parse_quantity(gold_text).ok_or_else(|| config(format!("gold answer `{gold_text}` is not a number")))?;
            if gold <= 0.0 {
                return Err(config(format!("gold quantity {gold} must be positive")));
            }
            let unit = example.measure_unit.as_deref().unwrap_or("");
            Ok(match parse_quantity(answer) {
                Some((pred, trailing)) if unit_matches(trailing, unit) => order_of_magnitude_score(pred, gold),
                _ => 0.0,
            })
        }
    }
}

/// Score of a trace: the dataset's failure score when no final answer was
/// reached, the metric otherwise.
pub fn score_trace(trace: &DecompositionTrace, example: &QaExample) -> Result<f64, EvalError> {
    match trace.final_answer() {
        Some(a) if !trace.failed() => score_answer(a, example),
        _ => Ok(example.dataset.failure_score()),
    }
}

pub fn score_run(record: &RunRecord, example: &QaExample) -> Result<f64, EvalError> {
    if record.example_id != example.id {
        return Err(EvalError::Mismatch {
            record: record.example_id.clone(),
            example: example.id.clone(),
        });
    }
    score_trace(&record.trace, example)
}

/// Full credit under the dataset's metric. Failed traces are never correct.
pub fn is_correct(trace: &DecompositionTrace, example: &QaExample) -> Result<bool, EvalError> {
    if trace.failed() {
        return Ok(false);
    }
    Ok(score_trace(trace, example)? >= 1.0 - 1e-9)
}

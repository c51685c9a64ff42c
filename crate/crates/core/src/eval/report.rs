use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::normalize_answer;
use crate::nligate::{bucket_entailment, BucketRow, BucketSample};
use crate::types::{DatasetId, RunRecord};

/// Means are reported on a 0-100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: DatasetId,
    pub variant: String,
    pub tier: String,
    pub count: usize,
    pub mean: f64,
    pub failure_rate: f64,
}

/// Groups records by (dataset, variant label, tier label). Groups with no
/// records never appear. Rows are sorted by key.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(DatasetId, String, String), (usize, f64, usize)> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry((r.dataset, r.variant_label(), r.tier_label().to_string()))
            .or_default();
        g.0 += 1;
        g.1 += r.score;
        g.2 += usize::from(r.trace.failed());
    }
    groups
        .into_iter()
        .map(|((dataset, variant, tier), (n, sum, failed))| AggregateRow {
            dataset,
            variant,
            tier,
            count: n,
            mean: sum * 100.0 / n as f64,
            failure_rate: failed as f64 * 100.0 / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub dataset: DatasetId,
    pub variant: String,
    pub tier: String,
    pub baseline_variant: String,
    pub baseline: f64,
    pub treated: f64,
    /// `treated - baseline`, rounded to one decimal.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub deltas: Vec<DeltaRow>,
    /// Treated rows with no no-retrieval baseline for their dataset.
    pub unmatched: Vec<String>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn base_variant(label: &str) -> &str {
    label.strip_suffix("-nli").unwrap_or(label)
}

/// Deltas of every treated row against the no-retrieval baseline of its
/// dataset. The baseline with the same prompt variant is preferred, then
/// `sa-nr`, then the first baseline row of the dataset.
pub fn robustness_report(baseline: &[AggregateRow], treated: &[AggregateRow]) -> RobustnessReport {
    let mut deltas = Vec::new();
    let mut unmatched = Vec::new();
    for t in treated {
        let same_dataset = || baseline.iter().filter(|b| b.dataset == t.dataset);
        let found = same_dataset()
            .find(|b| b.variant == base_variant(&t.variant))
            .or_else(|| same_dataset().find(|b| b.variant == "sa-nr"))
            .or_else(|| same_dataset().next());
        match found {
            Some(b) => deltas.push(DeltaRow {
                dataset: t.dataset,
                variant: t.variant.clone(),
                tier: t.tier.clone(),
                baseline_variant: b.variant.clone(),
                baseline: b.mean,
                treated: t.mean,
                delta: round1(t.mean - b.mean),
            }),
            None => unmatched.push(format!("{}/{}/{}", t.dataset, t.variant, t.tier)),
        }
    }
    RobustnessReport { deltas, unmatched }
}

impl RobustnessReport {
    /// Bar-plot data: one row per (dataset, variant, tier) with the delta.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,variant,tier,baseline,treated,delta\n");
        for d in &self.deltas {
            let _ = writeln!(
                out,
                "{},{},{},{:.1},{:.1},{:.1}",
                d.dataset, d.variant, d.tier, d.baseline, d.treated, d.delta
            );
        }
        out
    }
}

/// Entailment buckets over gated records that carry paired scores. Records
/// whose retrieval trace failed have no entailment statistic and land in the
/// low bucket.
pub fn entailment_buckets(records: &[RunRecord]) -> Vec<BucketRow> {
    let samples: Vec<BucketSample> = records
        .iter()
        .filter_map(|r| {
            let gate = r.gate.as_ref()?;
            let paired = r.paired_scores?;
            Some(BucketSample {
                p_entail: gate.min_p_entail.unwrap_or(0.0),
                delta: paired.with_retrieval - paired.without_retrieval,
            })
        })
        .collect();
    bucket_entailment(&samples)
}

/// Whether the normalized final answer occurs in some normalized retrieved
/// snippet. False for failed traces and traces without retrieval.
pub fn answer_in_context(record: &RunRecord) -> bool {
    let Some(answer) = record.trace.final_answer() else {
        return false;
    };
    let a = normalize_answer(answer);
    if a.is_empty() {
        return false;
    }
    record
        .trace
        .contexts
        .snippets()
        .iter()
        .any(|s| normalize_answer(&s.display_text()).contains(&a))
}

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;
use tracing::{info, warn};

use robust_ralm::backends::{
    EntailmentModel, Generator, HttpEntailment, HttpGenerator, HttpSettings, RecordingGenerator, ReplayGenerator,
    TableEntailment, DEFAULT_ENTAILMENT_THRESHOLD, DEFAULT_INFLIGHT_LIMIT,
};
use robust_ralm::controller::{Controller, ControllerError, ControllerEvent};
use robust_ralm::datagen::{self, DatagenConfig, DatagenError, FilterMode, Manifest};
use robust_ralm::dataset::{load_dataset, read_jsonl, sample_eval_subset, write_jsonl};
use robust_ralm::eval::{self, aggregate, answer_in_context, entailment_buckets, robustness_report, AggregateRow};
use robust_ralm::nligate::BucketRow;
use robust_ralm::retrieval::build::{build_index as build_snapshot, parse_questions, HttpSearch};
use robust_ralm::retrieval::{Corpus, NoRetrieval, NoisePolicy, NoiseMode, RetrievalIndex, Retriever};
use robust_ralm::selfask::{PromptSet, PromptVariant, VariantKind};
use robust_ralm::types::PairedScores;
use robust_ralm::{DatasetId, QaExample, RunRecord};

use crate::config::{BackendConfig, Config};
use crate::{BuildIndexArgs, CommonArgs, GendataArgs, ReportArgs, RunArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Backend(_) => 2,
        }
    }
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        match e {
            ControllerError::Backend(b) => CliError::Backend(b.to_string()),
            ControllerError::Retrieval(r) => CliError::Input(r.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Controller(c) => c.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

/// Config file merged with flags. Problems are collected, not returned early.
struct Settings {
    cfg: Config,
    problems: Vec<String>,
}

impl Settings {
    fn new(common: &CommonArgs) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Config::load(p).map_err(CliError::Input)?,
            None => Config::default(),
        };
        macro_rules! set {
            ($($field:ident).+ = $v:expr) => {
                if let Some(v) = $v.clone() {
                    cfg.$($field).+ = Some(v);
                }
            };
        }
        set!(dataset = common.dataset);
        set!(dataset_file = common.dataset_file);
        set!(index = common.index);
        set!(prompts_dir = common.prompts_dir);
        set!(seed = common.seed);
        set!(jobs = common.jobs);
        set!(tier = common.tier);
        set!(generator.record_transcript = common.record_transcript);
        if common.generator_url.is_some() || common.generator_transcript.is_some() {
            cfg.generator.url = common.generator_url.clone();
            cfg.generator.transcript = common.generator_transcript.clone();
        }
        Ok(Settings {
            cfg,
            problems: Vec::new(),
        })
    }

    fn parse<T: std::str::FromStr<Err = String>>(&mut self, value: Option<&str>, default: Option<T>, name: &str) -> Option<T> {
        match value {
            Some(v) => match v.parse() {
                Ok(t) => Some(t),
                Err(e) => {
                    self.problems.push(format!("{name}: {e}"));
                    None
                }
            },
            None => {
                if default.is_none() {
                    self.problems.push(format!("{name} is required"));
                }
                default
            }
        }
    }

    fn existing_file(&mut self, path: Option<&PathBuf>, name: &str) -> Option<PathBuf> {
        match path {
            None => {
                self.problems.push(format!("{name} is required"));
                None
            }
            Some(p) if !p.is_file() => {
                self.problems.push(format!("{name} not found: {}", p.display()));
                None
            }
            Some(p) => Some(p.clone()),
        }
    }

    fn finish(&mut self) -> Result<()> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Input(format!(
                "invalid configuration:\n  - {}",
                self.problems.join("\n  - ")
            )))
        }
    }
}

fn load_prompts(dataset: DatasetId, dir: Option<&Path>) -> Result<PromptSet> {
    let set = match dir {
        Some(d) => PromptSet::from_dir(d).map_err(input)?,
        None => PromptSet::builtin_nq(),
    };
    set.check_exemplar_count(dataset).map_err(input)?;
    Ok(set)
}

fn load_index(path: &Path) -> Result<RetrievalIndex> {
    RetrievalIndex::load(path).map_err(input)
}

fn make_generator(cfg: &BackendConfig) -> Result<Box<dyn Generator>> {
    if let Some(settings) = cfg.http_settings() {
        return Ok(Box::new(HttpGenerator::new(settings)));
    }
    let path = cfg.transcript.as_ref().expect("validated");
    Ok(Box::new(ReplayGenerator::load(path).map_err(input)?))
}

fn make_nli(cfg: &BackendConfig) -> Result<Box<dyn EntailmentModel>> {
    if let Some(settings) = cfg.http_settings() {
        return Ok(Box::new(HttpEntailment::new(settings)));
    }
    let path = cfg.transcript.as_ref().expect("validated");
    let mut table = TableEntailment::load(path).map_err(input)?;
    if let Some(p) = cfg.default_p_entail {
        table = table.with_default(p);
    }
    Ok(Box::new(table))
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get()).min(DEFAULT_INFLIGHT_LIMIT);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(default).max(1))
        .build()
        .map_err(input)
}

fn common_problems(s: &mut Settings, needs_index: bool) -> (Option<DatasetId>, Option<PathBuf>, Option<PathBuf>) {
    let dataset = s.parse::<DatasetId>(s.cfg.dataset.clone().as_deref(), None, "dataset");
    let dataset_file = s.existing_file(s.cfg.dataset_file.clone().as_ref(), "dataset file");
    let index = if needs_index {
        s.existing_file(s.cfg.index.clone().as_ref(), "index file")
    } else {
        None
    };
    if let (Some(d), None) = (dataset, &s.cfg.prompts_dir) {
        if d != DatasetId::NaturalQuestions {
            s.problems
                .push(format!("prompts_dir is required for {d} (built-in prompts cover nq only)"));
        }
    }
    if let Some(dir) = &s.cfg.prompts_dir {
        if !dir.is_dir() {
            s.problems.push(format!("prompts dir not found: {}", dir.display()));
        }
    }
    let gen_problems = s.cfg.generator.problems("generator", true);
    s.problems.extend(gen_problems);
    if s.cfg.jobs == Some(0) {
        s.problems.push("jobs must be at least 1".into());
    }
    (dataset, dataset_file, index)
}

fn write_transcript(recorder: &RecordingGenerator<Box<dyn Generator>>, path: Option<&PathBuf>) -> Result<()> {
    if let Some(p) = path {
        recorder.write(p).map_err(input)?;
        info!(path = %p.display(), "transcript written");
    }
    Ok(())
}

fn events_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "records".into());
    out.with_file_name(format!("{stem}.events.jsonl"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| input(format!("{}: {e}", p.display()))),
        _ => Ok(()),
    }
}

pub fn run(args: &RunArgs) -> Result<()> {
    let mut s = Settings::new(&args.common)?;
    if args.variant.is_some() {
        s.cfg.variant = args.variant.clone();
    }
    if args.no_retrieval {
        s.cfg.no_retrieval = Some(true);
    }
    if args.nli_gate {
        s.cfg.nli_gate = Some(true);
    }
    if args.threshold.is_some() {
        s.cfg.threshold = args.threshold;
    }
    if args.nli_url.is_some() || args.nli_transcript.is_some() {
        s.cfg.nli.url = args.nli_url.clone();
        s.cfg.nli.transcript = args.nli_transcript.clone();
    }
    if args.eval_size.is_some() {
        s.cfg.eval_size = args.eval_size;
    }
    if args.out.is_some() {
        s.cfg.out = args.out.clone();
    }

    let use_retrieval = !s.cfg.no_retrieval.unwrap_or(false);
    let nli_gate = s.cfg.nli_gate.unwrap_or(false);
    let (dataset, dataset_file, index_path) = common_problems(&mut s, use_retrieval);
    let variant = s.parse::<VariantKind>(s.cfg.variant.clone().as_deref(), Some(VariantKind::SaR1), "variant");
    let mode = s.parse::<NoiseMode>(s.cfg.tier.clone().as_deref(), Some(NoiseMode::AlwaysTop1), "tier");
    let threshold = s.cfg.threshold.unwrap_or(DEFAULT_ENTAILMENT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        s.problems.push(format!("threshold {threshold} outside [0, 1]"));
    }
    if nli_gate && !use_retrieval {
        s.problems.push("nli_gate needs retrieval; drop no_retrieval".into());
    }
    if nli_gate {
        let p = s.cfg.nli.problems("nli", true);
        s.problems.extend(p);
    }
    if s.cfg.out.is_none() {
        s.problems.push("out is required".into());
    }
    s.finish()?;
    let (dataset, dataset_file, variant, mode) = (
        dataset.expect("validated"),
        dataset_file.expect("validated"),
        variant.expect("validated"),
        mode.expect("validated"),
    );
    let cfg = &s.cfg;
    let seed = cfg.seed.unwrap_or(0);
    let out = cfg.out.clone().expect("validated");

    let mut examples = load_dataset(&dataset_file, dataset).map_err(input)?;
    if let Some(n) = cfg.eval_size {
        examples = sample_eval_subset(&examples, n, seed);
    }
    let prompts = load_prompts(dataset, cfg.prompts_dir.as_deref())?;
    let prompt = prompts.variant(variant).map_err(input)?;
    let fallback = prompts.variant(VariantKind::SaNr).map_err(input)?;
    let index = index_path.map(|p| load_index(&p)).transpose()?;
    let retriever: &dyn Retriever = match &index {
        Some(i) => i,
        None => &NoRetrieval,
    };
    let recorder = RecordingGenerator::new(make_generator(&cfg.generator)?);
    let nli = if nli_gate { Some(make_nli(&cfg.nli)?) } else { None };
    let policy = NoisePolicy::new(mode, seed);
    let ctl = Controller::new(&recorder, retriever);

    let pool = thread_pool(cfg.jobs)?;
    let results: Vec<(RunRecord, Vec<ControllerEvent>)> = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| answer_one(&ctl, ex, &prompt, &fallback, &policy, use_retrieval, nli.as_deref(), threshold, variant))
            .collect::<Result<Vec<_>>>()
    })?;

    ensure_parent(&out)?;
    let (records, events): (Vec<RunRecord>, Vec<Vec<ControllerEvent>>) = results.into_iter().unzip();
    write_jsonl(&out, &records).map_err(|e| input(format!("{}: {e}", out.display())))?;
    let events: Vec<ControllerEvent> = events.into_iter().flatten().collect();
    let ev_path = events_path(&out);
    write_jsonl(&ev_path, &events).map_err(|e| input(format!("{}: {e}", ev_path.display())))?;
    write_transcript(&recorder, cfg.generator.record_transcript.as_ref())?;

    let failed = records.iter().filter(|r| r.trace.failed()).count();
    let mean = records.iter().map(|r| r.score).sum::<f64>() * 100.0 / records.len().max(1) as f64;
    println!(
        "{} records, mean {:.1}, {} failed -> {}",
        records.len(),
        mean,
        failed,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn answer_one(
    ctl: &Controller<'_>,
    ex: &QaExample,
    prompt: &PromptVariant,
    fallback: &PromptVariant,
    policy: &NoisePolicy,
    use_retrieval: bool,
    nli: Option<&dyn EntailmentModel>,
    threshold: f64,
    variant: VariantKind,
) -> Result<(RunRecord, Vec<ControllerEvent>)> {
    let score = |t: &robust_ralm::DecompositionTrace| eval::score_trace(t, ex).map_err(input);
    let mut record = RunRecord {
        example_id: ex.id.clone(),
        dataset: ex.dataset,
        variant,
        nli_gated: nli.is_some(),
        noise_tier: use_retrieval.then_some(policy.mode),
        trace: robust_ralm::DecompositionTrace::new(ex.question.clone()),
        gate: None,
        paired_scores: None,
        score: 0.0,
    };
    let events = match nli {
        Some(nli) => {
            let gated = ctl.answer_with_nli_backoff(ex, prompt, fallback, policy, nli, threshold)?;
            let ralm = gated.gate.ralm_trace.as_ref().expect("set by controller");
            let nr = gated.gate.fallback_trace.as_ref().expect("set by controller");
            record.paired_scores = Some(PairedScores {
                with_retrieval: score(ralm)?,
                without_retrieval: score(nr)?,
            });
            record.trace = gated.chosen;
            record.gate = Some(gated.gate);
            gated.events
        }
        None => {
            let answered = ctl.answer_question(ex, prompt, policy, use_retrieval)?;
            record.trace = answered.trace;
            answered.events
        }
    };
    record.score = score(&record.trace)?;
    Ok((record, events))
}

pub fn gendata(args: &GendataArgs) -> Result<()> {
    let mut s = Settings::new(&args.common)?;
    if args.kind.is_some() {
        s.cfg.datagen.kind = args.kind.clone();
    }
    if args.mode.is_some() {
        s.cfg.datagen.mode = args.mode.clone();
    }
    if args.budget.is_some() {
        s.cfg.datagen.budget = args.budget;
    }
    if args.out_dir.is_some() {
        s.cfg.datagen.out_dir = args.out_dir.clone();
    }
    let (dataset, dataset_file, index_path) = common_problems(&mut s, true);
    let kind = match s.cfg.datagen.kind.as_deref() {
        None => dataset.map(DatasetId::is_multi_hop),
        Some("multi-hop") => Some(true),
        Some("single-hop") => Some(false),
        Some(other) => {
            s.problems
                .push(format!("kind: unknown `{other}` (expected single-hop or multi-hop)"));
            None
        }
    };
    let mode = s.parse::<FilterMode>(s.cfg.datagen.mode.clone().as_deref(), Some(FilterMode::SelfConsistency), "mode");
    let noise = s.parse::<NoiseMode>(s.cfg.tier.clone().as_deref(), Some(NoiseMode::UniformMix), "tier");
    if s.cfg.datagen.out_dir.is_none() {
        s.problems.push("out_dir is required".into());
    }
    s.finish()?;
    let (dataset, multi_hop, mode, noise) = (
        dataset.expect("validated"),
        kind.expect("validated"),
        mode.expect("validated"),
        noise.expect("validated"),
    );
    let cfg = &s.cfg;
    let out_dir = cfg.datagen.out_dir.clone().expect("validated");

    let examples = load_dataset(&dataset_file.expect("validated"), dataset).map_err(input)?;
    let prompts = load_prompts(dataset, cfg.prompts_dir.as_deref())?;
    let index = load_index(&index_path.expect("validated"))?;
    let recorder = RecordingGenerator::new(make_generator(&cfg.generator)?);

    let mut dcfg = DatagenConfig::new(cfg.seed.unwrap_or(0));
    dcfg.noise = noise;
    if let Some(b) = cfg.datagen.budget {
        if multi_hop {
            dcfg.budget.max_questions_multi_hop = b;
        } else {
            dcfg.budget.max_questions_single_hop = b;
        }
    }
    let corpus = if multi_hop {
        datagen::gen_multi_hop(&examples, &recorder, &prompts.no_retrieval, &index, mode, &dcfg)?
    } else {
        datagen::gen_single_hop(&examples, &recorder, &prompts.no_retrieval, &index, &dcfg)?
    };
    let manifest = Manifest::new(if multi_hop { "multi-hop" } else { "single-hop" }, &corpus, &dcfg);
    datagen::write_corpus(&out_dir, &corpus, &manifest)?;
    write_transcript(&recorder, cfg.generator.record_transcript.as_ref())?;
    println!(
        "{} examples from {} of {} questions -> {}",
        manifest.examples,
        manifest.questions,
        manifest.filter.questions_seen,
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ContextRate {
    dataset: DatasetId,
    variant: String,
    tier: String,
    /// Share of completed, incorrect answers that occur in the evidence.
    wrong_answer_in_context: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    aggregates: Vec<AggregateRow>,
    deltas: Vec<eval::DeltaRow>,
    unmatched: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entailment_buckets: Option<Vec<BucketRow>>,
    answer_in_context: Vec<ContextRate>,
}

fn context_rates(records: &[RunRecord], groups: &[AggregateRow]) -> Vec<ContextRate> {
    groups
        .iter()
        .filter(|g| g.tier != "none")
        .map(|g| {
            let wrong: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.dataset == g.dataset && r.variant_label() == g.variant && r.tier_label() == g.tier)
                .filter(|r| !r.trace.failed() && r.score < 1.0)
                .collect();
            let hits = wrong.iter().filter(|r| answer_in_context(r)).count();
            ContextRate {
                dataset: g.dataset,
                variant: g.variant.clone(),
                tier: g.tier.clone(),
                wrong_answer_in_context: (!wrong.is_empty()).then(|| hits as f64 / wrong.len() as f64),
            }
        })
        .collect()
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for path in &args.records {
        let rs: Vec<RunRecord> = read_jsonl(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        records.extend(rs);
    }
    let rows = aggregate(&records);
    let (baseline, treated): (Vec<AggregateRow>, Vec<AggregateRow>) =
        rows.iter().cloned().partition(|r| r.tier == "none");
    let robustness = robustness_report(&baseline, &treated);
    let buckets = records.iter().any(|r| r.gate.is_some()).then(|| entailment_buckets(&records));

    fs::create_dir_all(&args.out_dir).map_err(|e| input(format!("{}: {e}", args.out_dir.display())))?;
    let csv_path = args.out_dir.join("deltas.csv");
    fs::write(&csv_path, robustness.to_csv()).map_err(|e| input(format!("{}: {e}", csv_path.display())))?;
    let report = Report {
        answer_in_context: context_rates(&records, &rows),
        aggregates: rows,
        deltas: robustness.deltas,
        unmatched: robustness.unmatched,
        entailment_buckets: buckets,
    };
    let json_path = args.out_dir.join("report.json");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| input(format!("{}: {e}", json_path.display())))?;

    println!("{:<12} {:<14} {:<8} {:>6} {:>7} {:>8}", "dataset", "variant", "tier", "n", "score", "failed%");
    for r in &report.aggregates {
        println!(
            "{:<12} {:<14} {:<8} {:>6} {:>7.1} {:>8.1}",
            r.dataset.as_str(),
            r.variant,
            r.tier,
            r.count,
            r.mean,
            r.failure_rate
        );
    }
    for d in &report.deltas {
        println!("delta {}/{}/{}: {:+.1}", d.dataset, d.variant, d.tier, d.delta);
    }
    for u in &report.unmatched {
        warn!(row = %u, "no no-retrieval baseline");
    }
    if let Some(rows) = &report.entailment_buckets {
        for b in rows {
            println!("bucket {:?}: share {:.1}% delta {:+.3}", b.bucket, b.share, b.mean_delta);
        }
    }
    Ok(())
}

pub fn build_index(args: &BuildIndexArgs) -> Result<()> {
    let corpus: Corpus = args.corpus.parse().map_err(CliError::Input)?;
    let text = fs::read_to_string(&args.questions).map_err(|e| input(format!("{}: {e}", args.questions.display())))?;
    let questions = parse_questions(&text).map_err(|e| input(format!("{}: {e}", args.questions.display())))?;
    let mut settings = HttpSettings::new(args.backend_url.clone());
    if let Some(var) = &args.api_key_env {
        settings.api_key =
            Some(std::env::var(var).map_err(|_| input(format!("environment variable {var} is not set")))?);
    }
    let backend = HttpSearch::new(settings);
    let (records, report) = build_snapshot(&questions, &backend, corpus, args.num, &args.backend_url);
    if report.indexed == 0 && report.queries > 0 {
        return Err(CliError::Backend(format!(
            "no query could be indexed; first failure: {}",
            report.failures.first().map_or("none", |f| f.error.as_str())
        )));
    }
    ensure_parent(&args.out)?;
    write_jsonl(&args.out, &records).map_err(|e| input(format!("{}: {e}", args.out.display())))?;
    let report_path = args.out.with_extension("report.json");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&report_path, json).map_err(|e| input(format!("{}: {e}", report_path.display())))?;
    for q in &report.lowrank_unavailable {
        warn!(query = %q, "lowrank-unavailable");
    }
    println!(
        "{} of {} queries indexed{}, average low rank {}",
        report.indexed,
        report.queries,
        if report.partial { " (partial)" } else { "" },
        report.average_low_rank.map_or("n/a".to_string(), |r| format!("{r:.2}"))
    );
    Ok(())
}

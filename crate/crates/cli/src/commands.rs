//! Command implementations. Each command resolves every input (problems,
//! adapters, detectors, data files) before doing any work, so configuration
//! mistakes surface as exit code 2 with nothing written.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stepprune::adapters::synthetic::SyntheticDomain;
use stepprune::adapters::{
    build_dataset, read_dataset, Annotator, CachedAnnotator, DatasetBuildConfig, DatasetError, JudgeClient,
    LlmGenerator, PrmClient, RemoteScorer, SyntheticJudge,
};
use stepprune::classifier::{
    em_train, evaluate, load_model, save_model, BinaryMetrics, EmError, EmIteration, LabeledPair, TrainError,
};
use stepprune::domain::{validate_problem_set, ProblemInstance, SearchConfig};
use stepprune::equiv::{CascadeDetector, Detector, RatioDetector};
use stepprune::metrics::{render_table, BenchReport, ProblemResult};
use stepprune::search::{emit_trace, read_trace, search, Generator, RewardModel, SearchStats, TraceEvent};
use stepprune::util::Fnv64;

use crate::config::{DetectorKind, GeneratorKind, JudgeKind, ProblemSource, RewardKind, RunConfig};
use crate::{CliError, RunArgs};

fn config_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

fn runtime_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

struct Runtime {
    problems: Vec<ProblemInstance>,
    generator: Arc<dyn Generator>,
    reward: Arc<dyn RewardModel>,
    pool: rayon::ThreadPool,
}

fn read_problems(path: &Path) -> Result<Vec<ProblemInstance>, CliError> {
    let file = File::open(path).map_err(|e| config_err(format!("problems.path {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| config_err(format!("problems.path {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line)
            .map_err(|e| config_err(format!("problems.path {} line {}: {e}", path.display(), i + 1)))?;
        out.push(p);
    }
    Ok(out)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(runtime_err)
}

fn prepare(cfg: &RunConfig) -> Result<Runtime, CliError> {
    let domain = Arc::new(SyntheticDomain::new(cfg.synthetic.clone()).map_err(|e| config_err(format!("synthetic.{e}")))?);
    let problems = match &cfg.problems {
        ProblemSource::Synthetic { count } => domain.problems(*count),
        ProblemSource::File { path } => read_problems(path)?,
    };
    if problems.is_empty() {
        return Err(config_err("problems: the problem set is empty"));
    }
    validate_problem_set(&problems).map_err(|e| config_err(format!("problems: {e}")))?;
    let generator: Arc<dyn Generator> = match &cfg.generator {
        GeneratorKind::Synthetic => domain.clone(),
        GeneratorKind::Llm(c) => Arc::new(LlmGenerator::new(c.clone()).map_err(|e| config_err(format!("generator: {e}")))?),
    };
    let reward: Arc<dyn RewardModel> = match &cfg.reward {
        RewardKind::Synthetic => domain,
        RewardKind::Prm { endpoint } => {
            Arc::new(PrmClient::new(endpoint.clone()).map_err(|e| config_err(format!("reward: {e}")))?)
        }
    };
    Ok(Runtime { problems, generator, reward, pool: thread_pool(cfg.workers)? })
}

fn build_detector(kind: &DetectorKind, cfg: &RunConfig, at: &str) -> Result<Option<Arc<dyn Detector>>, CliError> {
    let ratio = |t: Option<f64>| t.unwrap_or(cfg.search.ratio_threshold);
    Ok(match kind {
        DetectorKind::None => None,
        DetectorKind::Oracle => Some(Arc::new(SyntheticDomain::oracle_detector())),
        DetectorKind::Ratio { threshold } => Some(Arc::new(RatioDetector::new(ratio(*threshold)))),
        DetectorKind::Classifier { model, ratio_threshold, decision_threshold } => {
            let m = load_model(model).map_err(|e| config_err(format!("{at}.model {}: {e}", model.display())))?;
            let t = decision_threshold.unwrap_or(m.decision_threshold);
            Some(Arc::new(CascadeDetector::new(Arc::new(m), ratio(*ratio_threshold)).with_decision_threshold(t)))
        }
        DetectorKind::Remote { endpoint, ratio_threshold, decision_threshold } => {
            let scorer = RemoteScorer::new(endpoint.clone()).map_err(|e| config_err(format!("{at}.endpoint: {e}")))?;
            let mut d = CascadeDetector::new(Arc::new(scorer), ratio(*ratio_threshold));
            if let Some(t) = decision_threshold {
                d = d.with_decision_threshold(*t);
            }
            Some(Arc::new(d))
        }
    })
}

/// File name for a problem's trace; ids with unsafe characters get a hash
/// suffix so distinct ids never collide.
pub fn trace_file_name(problem_id: &str) -> String {
    let safe: String = problem_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if safe == problem_id && !safe.starts_with('.') {
        format!("{safe}.jsonl")
    } else {
        format!("{safe}-{:016x}.jsonl", Fnv64::new().str(problem_id).finish())
    }
}

/// One line of `results/{strategy}.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub problem_id: String,
    pub solved: bool,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub pruned_candidates: u64,
    pub stats: RecordStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordStats {
    pub simulations: usize,
    pub expansions: usize,
    pub detector_calls: usize,
    pub detector_failures: usize,
}

impl RecordStats {
    fn add(&mut self, o: &RecordStats) {
        self.simulations += o.simulations;
        self.expansions += o.expansions;
        self.detector_calls += o.detector_calls;
        self.detector_failures += o.detector_failures;
    }
}

impl From<&SearchStats> for RecordStats {
    fn from(s: &SearchStats) -> Self {
        RecordStats {
            simulations: s.simulations,
            expansions: s.expansions,
            detector_calls: s.detector_calls,
            detector_failures: s.detector_failures,
        }
    }
}

/// Records already written by an earlier run; a torn last line is ignored.
fn read_records(path: &Path) -> HashMap<String, ProblemRecord> {
    let Ok(file) = File::open(path) else { return HashMap::new() };
    BufReader::new(file)
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| serde_json::from_str::<ProblemRecord>(&l).ok())
        .map(|r| (r.problem_id.clone(), r))
        .collect()
}

struct StrategyRun {
    /// In problem order; problems that failed are absent.
    records: Vec<ProblemRecord>,
    errors: Vec<String>,
}

impl StrategyRun {
    fn totals(&self) -> (u64, RecordStats) {
        let mut stats = RecordStats::default();
        let mut pruned = 0;
        for r in &self.records {
            stats.add(&r.stats);
            pruned += r.pruned_candidates;
        }
        (pruned, stats)
    }

    fn per_problem(&self) -> Vec<ProblemResult> {
        self.records
            .iter()
            .map(|r| ProblemResult {
                problem_id: r.problem_id.clone(),
                solved: r.solved,
                tokens: r.tokens,
                answer: r.answer.clone(),
            })
            .collect()
    }
}

/// Runs every problem on the pool, writing its trace and appending its
/// record as soon as it finishes.
fn run_strategy(
    rt: &Runtime,
    detector: Option<&dyn Detector>,
    config: &SearchConfig,
    results_path: &Path,
    trace_dir: &Path,
    resume: bool,
) -> Result<StrategyRun, CliError> {
    fs::create_dir_all(trace_dir).map_err(io(trace_dir))?;
    if let Some(dir) = results_path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let done = if resume { read_records(results_path) } else { HashMap::new() };
    let mut file = OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(results_path)
        .map_err(io(results_path))?;
    if resume && fs::read(results_path).map_err(io(results_path))?.last().is_some_and(|&b| b != b'\n') {
        file.write_all(b"\n").map_err(io(results_path))?;
    }
    let writer = Mutex::new(file);
    let fresh: Vec<(String, Result<ProblemRecord, String>)> = rt.pool.install(|| {
        rt.problems
            .par_iter()
            .filter(|p| !done.contains_key(&p.id))
            .map(|p| {
                let run = || -> Result<ProblemRecord, String> {
                    let out = search(p, rt.generator.as_ref(), rt.reward.as_ref(), detector, config)
                        .map_err(|e| e.to_string())?;
                    emit_trace(&out.trace, &trace_dir.join(trace_file_name(&p.id))).map_err(|e| e.to_string())?;
                    let record = ProblemRecord {
                        problem_id: p.id.clone(),
                        solved: out.solved,
                        tokens: out.ledger.generated_total,
                        answer: out.answer,
                        pruned_candidates: out.ledger.pruned_candidates,
                        stats: RecordStats::from(&out.stats),
                    };
                    let line = serde_json::to_string(&record).map_err(|e| e.to_string())?;
                    let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
                    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| e.to_string())?;
                    Ok(record)
                };
                let result = run();
                if let Err(e) = &result {
                    log::error!("problem {}: {e}", p.id);
                }
                (p.id.clone(), result)
            })
            .collect()
    });
    let mut fresh: HashMap<String, Result<ProblemRecord, String>> = fresh.into_iter().collect();
    let mut done = done;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for p in &rt.problems {
        if let Some(r) = done.remove(&p.id) {
            records.push(r);
        } else {
            match fresh.remove(&p.id) {
                Some(Ok(r)) => records.push(r),
                Some(Err(e)) => errors.push(format!("problem {}: {e}", p.id)),
                None => unreachable!("every problem is either resumed or run"),
            }
        }
    }
    Ok(StrategyRun { records, errors })
}

fn io(p: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| runtime_err(format!("{}: {e}", p.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn create_output(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime_err(format!("{}: {e}", dir.display())))
}

fn finish(errors: &[String]) -> Result<(), CliError> {
    match errors {
        [] => Ok(()),
        [only] => Err(runtime_err(only)),
        [first, rest @ ..] => Err(runtime_err(format!("{first} (and {} more failures)", rest.len()))),
    }
}

#[derive(Serialize)]
struct SearchReport<'a> {
    seed: u64,
    config: &'a RunConfig,
    report: BenchReport,
    stats: RecordStats,
    errors: Vec<String>,
}

fn method_name(cfg: &SearchConfig, detector: &DetectorKind) -> String {
    let algorithm = match cfg.algorithm {
        stepprune::Algorithm::Mcts => "mcts",
        stepprune::Algorithm::Sbs => "sbs",
    };
    match detector {
        DetectorKind::None => algorithm.to_owned(),
        _ if !cfg.pruning_enabled => algorithm.to_owned(),
        d => format!("{algorithm}+{}", d.label()),
    }
}

/// Writes `traces/`, `results/search.jsonl` and `report.json`.
pub fn cmd_search(cfg: &RunConfig, args: &RunArgs) -> Result<(), CliError> {
    let rt = prepare(cfg)?;
    let detector = build_detector(&cfg.detector, cfg, "detector")?;
    create_output(&args.output)?;
    let run = run_strategy(
        &rt,
        detector.as_deref(),
        &cfg.search,
        &args.output.join("results").join("search.jsonl"),
        &args.output.join("traces"),
        args.resume,
    )?;
    let (pruned, stats) = run.totals();
    let report = BenchReport::build(method_name(&cfg.search, &cfg.detector), run.per_problem(), pruned, None);
    println!("{}", render_table(std::slice::from_ref(&report)));
    write_json(
        &args.output.join("report.json"),
        &SearchReport { seed: cfg.seed, config: cfg, report, stats, errors: run.errors.clone() },
    )?;
    finish(&run.errors)
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    seed: u64,
    config: &'a RunConfig,
    reports: Vec<BenchReport>,
    stats: BTreeMap<String, RecordStats>,
    errors: BTreeMap<String, Vec<String>>,
}

/// Runs every listed strategy with the same problems and seed. Pruning is on
/// exactly for strategies that name a detector. Writes `bench.json` and
/// `bench.txt`; ratios are relative to the first strategy.
pub fn cmd_bench(cfg: &RunConfig, args: &RunArgs) -> Result<(), CliError> {
    let strategies = &cfg.bench.strategies;
    if strategies.len() < 2 {
        return Err(config_err(format!("bench.strategies: at least 2 strategies are required, got {}", strategies.len())));
    }
    let rt = prepare(cfg)?;
    let detectors = strategies
        .iter()
        .enumerate()
        .map(|(i, s)| build_detector(&s.detector, cfg, &format!("bench.strategies.{i}.detector")))
        .collect::<Result<Vec<_>, _>>()?;
    create_output(&args.output)?;

    let mut reports: Vec<BenchReport> = Vec::new();
    let mut stats = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for (s, detector) in strategies.iter().zip(&detectors) {
        let search_cfg = SearchConfig { pruning_enabled: detector.is_some(), ..cfg.search.clone() };
        let run = run_strategy(
            &rt,
            detector.as_deref(),
            &search_cfg,
            &args.output.join("results").join(format!("{}.jsonl", s.name)),
            &args.output.join("traces").join(&s.name),
            args.resume,
        )?;
        let (pruned, totals) = run.totals();
        let baseline = reports.first().map(|b| (b.method_name.as_str(), b.tokens));
        let report = BenchReport::build(s.name.clone(), run.per_problem(), pruned, baseline);
        reports.push(report);
        stats.insert(s.name.clone(), totals);
        if !run.errors.is_empty() {
            errors.insert(s.name.clone(), run.errors);
        }
    }
    let table = render_table(&reports);
    println!("{table}");
    fs::write(args.output.join("bench.txt"), format!("{table}\n")).map_err(runtime_err)?;
    write_json(&args.output.join("bench.json"), &BenchOutput { seed: cfg.seed, config: cfg, reports, stats, errors: errors.clone() })?;
    let flat: Vec<String> = errors.into_iter().flat_map(|(name, es)| es.into_iter().map(move |e| format!("{name}: {e}"))).collect();
    finish(&flat)
}

fn read_trace_dir(dir: &Path) -> Result<Vec<Vec<TraceEvent>>, CliError> {
    if !dir.is_dir() {
        return Err(config_err(format!("dataset.traces {}: not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "jsonl"))
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    paths.iter().map(|p| read_trace(p).map_err(runtime_err)).collect()
}

fn dataset_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::Config(m) => config_err(format!("dataset: {m}")),
        other => runtime_err(other),
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    config: &'a RunConfig,
}

/// Harvests sibling pairs from `dataset.traces`, or from fresh unpruned
/// searches over the configured problems, and writes the annotated splits,
/// `manifest.json` and `run_config.json`.
pub fn cmd_dataset_build(cfg: &RunConfig, args: &RunArgs) -> Result<(), CliError> {
    let ds = &cfg.dataset;
    let build_config =
        DatasetBuildConfig { band: ds.band, sample_sizes: ds.sample_sizes, split_ratios: ds.split_ratios, seed: cfg.seed };
    let judge_client = match &ds.judge {
        JudgeKind::Synthetic => None,
        JudgeKind::Llm(j) => Some(JudgeClient::new(j.clone()).map_err(|e| config_err(format!("dataset.judge: {e}")))?),
    };
    let traces = match &ds.traces {
        Some(dir) => read_trace_dir(dir)?,
        None => {
            let rt = prepare(cfg)?;
            create_output(&args.output)?;
            let trace_dir = args.output.join("traces");
            let search_cfg = SearchConfig { pruning_enabled: false, ..cfg.search.clone() };
            let run = run_strategy(
                &rt,
                None,
                &search_cfg,
                &args.output.join("results").join("harvest.jsonl"),
                &trace_dir,
                args.resume,
            )?;
            finish(&run.errors)?;
            rt.problems
                .iter()
                .map(|p| read_trace(&trace_dir.join(trace_file_name(&p.id))).map_err(runtime_err))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    create_output(&args.output)?;
    let cache = ds.cache.clone().unwrap_or_else(|| args.output.join("judge_cache.jsonl"));
    let pool = thread_pool(cfg.workers)?;
    let build = |annotator: &dyn Annotator| pool.install(|| build_dataset(&traces, &build_config, annotator, &args.output));
    let manifest = match judge_client {
        None => build(&CachedAnnotator::with_file(SyntheticJudge::new(), &cache).map_err(runtime_err)?),
        Some(j) => build(&CachedAnnotator::with_file(j, &cache).map_err(runtime_err)?),
    }
    .map_err(dataset_error)?;
    write_json(&args.output.join("run_config.json"), &RunRecord { seed: cfg.seed, config: cfg })?;
    for (split, s) in &manifest.splits {
        println!("{:<6} {:>7} pairs  sha256 {}", split.name(), s.written, s.sha256);
    }
    Ok(())
}

fn labeled_file(path: &Path, field: &str) -> Result<Vec<LabeledPair>, CliError> {
    if !path.is_file() {
        return Err(config_err(format!("{field}: {} does not exist", path.display())));
    }
    Ok(read_dataset(path).map_err(runtime_err)?.iter().map(|r| r.to_labeled()).collect())
}

#[derive(Serialize)]
struct EmHistory<'a> {
    seed: u64,
    config: &'a RunConfig,
    train_pairs: usize,
    valid_pairs: usize,
    best_iteration: usize,
    history: Vec<EmIteration>,
}

/// Trains on `train.jsonl` with EM refinement scored on `valid.jsonl`, then
/// writes `model.bin` and `em_history.json`.
pub fn cmd_pruner_train(cfg: &RunConfig, args: &RunArgs) -> Result<(), CliError> {
    let dir = cfg.train.data.as_ref().ok_or_else(|| config_err("train.data: a dataset directory is required"))?;
    let train = labeled_file(&dir.join("train.jsonl"), "train.data")?;
    let valid = labeled_file(&dir.join("valid.jsonl"), "train.data")?;
    create_output(&args.output)?;
    let pool = thread_pool(cfg.workers)?;
    let outcome = pool.install(|| em_train(&train, &valid, &cfg.train.features, &cfg.train.em)).map_err(|e| match e {
        EmError::Config(m) => config_err(format!("train.em: {m}")),
        EmError::Train(TrainError::Config(m)) => config_err(format!("train: {m}")),
        EmError::Train(TrainError::SingleClass { positives, negatives }) => runtime_err(format!(
            "training data has a single class after binarization: {positives} positive, {negatives} negative"
        )),
        other => runtime_err(other),
    })?;
    let mut model = outcome.model;
    model.decision_threshold = cfg.train.decision_threshold;
    save_model(&model, &args.output.join("model.bin")).map_err(runtime_err)?;
    let best = &outcome.history[outcome.best_iteration];
    println!(
        "best iteration {} of {}: valid F1 {:.4}",
        outcome.best_iteration,
        outcome.history.len(),
        best.validation.f1
    );
    write_json(
        &args.output.join("em_history.json"),
        &EmHistory {
            seed: cfg.seed,
            config: cfg,
            train_pairs: train.len(),
            valid_pairs: valid.len(),
            best_iteration: outcome.best_iteration,
            history: outcome.history,
        },
    )
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    seed: u64,
    config: &'a RunConfig,
    model: &'a Path,
    data: &'a Path,
    pairs: usize,
    metrics: BinaryMetrics,
}

/// Scores a model on labeled pairs and writes `metrics.json`. The model
/// defaults to `model.bin` in the output directory.
pub fn cmd_pruner_eval(cfg: &RunConfig, args: &RunArgs) -> Result<(), CliError> {
    let default_model = args.output.join("model.bin");
    let model_path = cfg.eval.model.as_deref().unwrap_or(&default_model);
    let data_path = cfg.eval.data.as_deref().ok_or_else(|| config_err("eval.data: a labeled JSONL file is required"))?;
    if !model_path.is_file() {
        return Err(config_err(format!("eval.model: {} does not exist", model_path.display())));
    }
    let mut model = load_model(model_path).map_err(|e| config_err(format!("eval.model {}: {e}", model_path.display())))?;
    let data = labeled_file(data_path, "eval.data")?;
    if let Some(t) = cfg.eval.decision_threshold {
        model.decision_threshold = t;
    }
    let pool = thread_pool(cfg.workers)?;
    let metrics = pool.install(|| evaluate(&model, &data));
    println!(
        "precision {:.4}  recall {:.4}  F1 {:.4}  (tp {} fp {} tn {} fn {})",
        metrics.precision, metrics.recall, metrics.f1, metrics.tp, metrics.fp, metrics.tn, metrics.fn_
    );
    create_output(&args.output)?;
    write_json(
        &args.output.join("metrics.json"),
        &EvalOutput { seed: cfg.seed, config: cfg, model: model_path, data: data_path, pairs: data.len(), metrics },
    )
}

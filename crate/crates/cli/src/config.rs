//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stepprune::adapters::llm::LlmConfig;
use stepprune::adapters::synthetic::SyntheticDomainConfig;
use stepprune::adapters::{EndpointConfig, JudgeConfig, SplitSizes};
use stepprune::classifier::{EmConfig, FeatureConfig};
use stepprune::domain::SearchConfig;
use stepprune::textdist::RatioBand;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSource {
    /// Generated by the synthetic domain.
    Synthetic { count: usize },
    /// JSON lines of `{"id", "statement", "reference_answer"}`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorKind {
    Synthetic,
    Llm(LlmConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RewardKind {
    Synthetic,
    Prm { endpoint: EndpointConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JudgeKind {
    Synthetic,
    Llm(JudgeConfig),
}

/// Pruning strategy. Cascade thresholds default to `search.ratio_threshold`
/// and the model's stored decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorKind {
    None,
    Oracle,
    Ratio {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
    },
    Classifier {
        model: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ratio_threshold: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decision_threshold: Option<f64>,
    },
    Remote {
        endpoint: EndpointConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ratio_threshold: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decision_threshold: Option<f64>,
    },
}

impl DetectorKind {
    pub fn label(&self) -> &'static str {
        match self {
            DetectorKind::None => "none",
            DetectorKind::Oracle => "oracle",
            DetectorKind::Ratio { .. } => "ratio",
            DetectorKind::Classifier { .. } => "classifier",
            DetectorKind::Remote { .. } => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub name: String,
    pub detector: DetectorKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Rows of the comparison; the first is the ratio baseline.
    pub strategies: Vec<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory of trace files to harvest; when unset, vanilla searches over
    /// the configured problems produce the traces.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traces: Option<PathBuf>,
    pub band: RatioBand,
    pub sample_sizes: SplitSizes,
    pub split_ratios: [u32; 3],
    pub judge: JudgeKind,
    /// Judge cache file; defaults to `judge_cache.jsonl` in the output dir.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            traces: None,
            band: RatioBand::default(),
            sample_sizes: SplitSizes { train: 800, valid: 100, test: 100 },
            split_ratios: [8, 1, 1],
            judge: JudgeKind::Synthetic,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Dataset directory holding `train.jsonl` and `valid.jsonl`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub features: FeatureConfig,
    pub em: EmConfig,
    pub decision_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            data: None,
            features: FeatureConfig::default(),
            em: EmConfig::default(),
            decision_threshold: stepprune::equiv::DEFAULT_DECISION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Labeled JSONL to score, usually a `test.jsonl`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Propagated into every seeded component.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub problems: ProblemSource,
    pub synthetic: SyntheticDomainConfig,
    pub search: SearchConfig,
    pub generator: GeneratorKind,
    pub reward: RewardKind,
    pub detector: DetectorKind,
    pub bench: BenchSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            problems: ProblemSource::Synthetic { count: 50 },
            synthetic: SyntheticDomainConfig::default(),
            search: SearchConfig::default(),
            generator: GeneratorKind::Synthetic,
            reward: RewardKind::Synthetic,
            detector: DetectorKind::None,
            bench: BenchSection::default(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn check_unit(field: &str, v: Option<f64>) -> Result<(), ConfigError> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => Err(err(format!("{field}: must lie in [0, 1], got {x}"))),
        _ => Ok(()),
    }
}

fn check_detector(path: &str, d: &DetectorKind) -> Result<(), ConfigError> {
    match d {
        DetectorKind::None | DetectorKind::Oracle => Ok(()),
        DetectorKind::Ratio { threshold } => check_unit(&format!("{path}.threshold"), *threshold),
        DetectorKind::Classifier { ratio_threshold, decision_threshold, .. } => {
            check_unit(&format!("{path}.ratio_threshold"), *ratio_threshold)?;
            check_unit(&format!("{path}.decision_threshold"), *decision_threshold)
        }
        DetectorKind::Remote { endpoint, ratio_threshold, decision_threshold } => {
            endpoint.validate().map_err(|e| err(format!("{path}.endpoint: {e}")))?;
            check_unit(&format!("{path}.ratio_threshold"), *ratio_threshold)?;
            check_unit(&format!("{path}.decision_threshold"), *decision_threshold)
        }
    }
}

impl RunConfig {
    /// Copies the top-level seed into every seeded section.
    pub fn propagate_seed(&mut self) {
        self.synthetic.seed = self.seed;
        self.search.seed = self.seed;
        self.train.em.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.search.validate().map_err(|e| err(format!("search: {e}")))?;
        self.synthetic.validate().map_err(|e| err(format!("synthetic: {e}")))?;
        if let ProblemSource::Synthetic { count: 0 } = self.problems {
            return Err(err("problems.count: must be positive"));
        }
        if let GeneratorKind::Llm(c) = &self.generator {
            c.endpoint.validate().map_err(|e| err(format!("generator.endpoint: {e}")))?;
        }
        if let RewardKind::Prm { endpoint } = &self.reward {
            endpoint.validate().map_err(|e| err(format!("reward.endpoint: {e}")))?;
        }
        check_detector("detector", &self.detector)?;
        for (i, s) in self.bench.strategies.iter().enumerate() {
            check_detector(&format!("bench.strategies.{i}.detector"), &s.detector)?;
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(err(format!("bench.strategies.{i}.name: must be a nonempty file-safe name")));
            }
            if self.bench.strategies[..i].iter().any(|o| o.name == s.name) {
                return Err(err(format!("bench.strategies.{i}.name: duplicate name {:?}", s.name)));
            }
        }
        self.dataset.band.validate().map_err(|e| err(format!("dataset.band: {e}")))?;
        if self.dataset.split_ratios.iter().all(|&r| r == 0) {
            return Err(err("dataset.split_ratios: at least one ratio must be positive"));
        }
        if let JudgeKind::Llm(j) = &self.dataset.judge {
            j.endpoint.validate().map_err(|e| err(format!("dataset.judge.endpoint: {e}")))?;
        }
        self.train.features.validate().map_err(|e| err(format!("train.features: {e}")))?;
        self.train.em.validate().map_err(|e| err(format!("train.em: {e}")))?;
        check_unit("train.decision_threshold", Some(self.train.decision_threshold))?;
        check_unit("eval.decision_threshold", self.eval.decision_threshold)?;
        Ok(())
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Applies `path.to.key=value` to the resolved config tree. Intermediate
/// segments must exist; array elements are addressed by index.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(format!("override {assignment:?} is not key=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(err(format!("override key {path:?} is malformed")));
    }
    let mut node = root;
    for (depth, seg) in segments.iter().enumerate() {
        let last = depth + 1 == segments.len();
        let here = segments[..=depth].join(".");
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert((*seg).to_owned(), parse_value(raw.trim()));
                    return Ok(());
                }
                t.get_mut(*seg).ok_or_else(|| err(format!("override key {here:?} does not exist")))?
            }
            toml::Value::Array(a) => {
                let i: usize = seg.parse().map_err(|_| err(format!("override key {here:?}: expected an index")))?;
                let len = a.len();
                let slot = a.get_mut(i).ok_or_else(|| err(format!("override key {here:?}: index out of range ({len})")))?;
                if last {
                    *slot = parse_value(raw.trim());
                    return Ok(());
                }
                slot
            }
            _ => return Err(err(format!("override key {here:?} does not name a table"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Reads, overrides, resolves and validates a run configuration.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
    let parsed: RunConfig = toml::from_str(&text).map_err(|e| err(format!("{}: {e}", path.display())))?;
    let cfg = with_overrides(parsed, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn with_overrides(cfg: RunConfig, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut cfg = if overrides.is_empty() {
        cfg
    } else {
        let mut tree = toml::Value::try_from(&cfg).map_err(|e| err(format!("config does not serialize: {e}")))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        tree.try_into().map_err(|e: toml::de::Error| err(format!("after overrides: {e}")))?
    };
    cfg.propagate_seed();
    Ok(cfg)
}

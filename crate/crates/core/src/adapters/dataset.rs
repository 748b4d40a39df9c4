//! Step-pair dataset construction from search traces.
//!
//! Problems are assigned to splits first; pairs inherit their problem's
//! split, so no problem contributes to two splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::LabeledPair;
use crate::search::{EventPayload, TraceEvent};
use crate::textdist::{levenshtein_ratio, RatioBand};
use crate::util::{rng_from, Fnv64};

use super::judge::Annotator;
use super::AdapterError;

pub const HARVEST_POLICY: &str = "all_expansion_batches";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub sentence1: String,
    pub sentence2: String,
    pub reasoning_step: String,
    pub result: u8,
    pub split: Split,
    pub problem_id: String,
}

impl DatasetRecord {
    pub fn to_labeled(&self) -> LabeledPair {
        LabeledPair {
            sentence1: self.sentence1.clone(),
            sentence2: self.sentence2.clone(),
            level: self.result,
            reasoning: Some(self.reasoning_step.clone()).filter(|r| !r.is_empty()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiblingPair {
    pub problem_id: String,
    pub sentence1: String,
    pub sentence2: String,
}

/// All unordered pairs of candidate texts within each expansion batch, in
/// trace order.
pub fn extract_sibling_pairs(traces: &[Vec<TraceEvent>]) -> Vec<SiblingPair> {
    let mut out = Vec::new();
    for events in traces {
        let mut batches: BTreeMap<(String, u64), Vec<&str>> = BTreeMap::new();
        for e in events {
            if let EventPayload::Expand { batch, text, .. } = &e.payload {
                batches.entry((e.problem_id.clone(), *batch)).or_default().push(text);
            }
        }
        for ((problem_id, _), texts) in batches {
            for (i, a) in texts.iter().enumerate() {
                for b in &texts[i + 1..] {
                    out.push(SiblingPair {
                        problem_id: problem_id.clone(),
                        sentence1: (*a).to_owned(),
                        sentence2: (*b).to_owned(),
                    });
                }
            }
        }
    }
    out
}

/// Seeded problem-level split. Counts follow `ratios` with largest-remainder
/// rounding.
pub fn assign_splits<S: AsRef<str>>(problem_ids: &[S], ratios: [u32; 3], seed: u64) -> BTreeMap<String, Split> {
    let mut ids: Vec<&str> = problem_ids.iter().map(AsRef::as_ref).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = rng_from(Fnv64::new().str("splits").u64(seed).finish());
    ids.shuffle(&mut rng);
    let n = ids.len() as u64;
    let total: u64 = ratios.iter().map(|&r| r as u64).sum::<u64>().max(1);
    let mut counts: Vec<u64> = ratios.iter().map(|&r| n * r as u64 / total).collect();
    let mut rem: Vec<(u64, usize)> = ratios.iter().enumerate().map(|(i, &r)| (n * r as u64 % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - counts.iter().sum::<u64>();
    for &(_, i) in rem.iter().take(short as usize) {
        counts[i] += 1;
    }
    let mut out = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, &c) in Split::ALL.iter().zip(&counts) {
        for id in it.by_ref().take(c as usize) {
            out.insert(id.to_owned(), *split);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBuildConfig {
    #[serde(default)]
    pub band: RatioBand,
    pub sample_sizes: SplitSizes,
    #[serde(default = "default_ratios")]
    pub split_ratios: [u32; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_ratios() -> [u32; 3] {
    [8, 1, 1]
}

impl DatasetBuildConfig {
    pub fn new(sample_sizes: SplitSizes, seed: u64) -> Self {
        DatasetBuildConfig { band: RatioBand::default(), sample_sizes, split_ratios: default_ratios(), seed }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("{split:?} split: requested {requested} pairs but only {available} fall inside the ratio band")]
    InsufficientPairs { split: Split, requested: usize, available: usize },
    #[error("annotation failed for a {split:?} pair of problem {problem_id}: {source}")]
    Annotation { split: Split, problem_id: String, source: AdapterError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub problems: usize,
    pub extracted_pairs: usize,
    pub in_band_pairs: usize,
    pub requested: usize,
    pub written: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub band: RatioBand,
    pub split_ratios: [u32; 3],
    pub sample_sizes: SplitSizes,
    pub harvest_policy: String,
    pub annotator: String,
    pub traces: usize,
    pub splits: BTreeMap<Split, SplitSummary>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Extracts sibling pairs, keeps those inside the ratio band, draws a seeded
/// uniform sample per split, annotates it, and writes `{split}.jsonl` plus
/// `manifest.json` into `out_dir`.
pub fn build_dataset(
    traces: &[Vec<TraceEvent>],
    config: &DatasetBuildConfig,
    annotator: &dyn Annotator,
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    config.band.validate().map_err(|e| DatasetError::Config(e.to_string()))?;
    if config.split_ratios.iter().all(|&r| r == 0) {
        return Err(DatasetError::Config("split_ratios are all zero".into()));
    }

    let problem_ids: Vec<&str> = traces.iter().flatten().map(|e| e.problem_id.as_str()).collect();
    let splits = assign_splits(&problem_ids, config.split_ratios, config.seed);

    let mut pools: BTreeMap<Split, Vec<SiblingPair>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for pair in extract_sibling_pairs(traces) {
        let split = splits[&pair.problem_id];
        pools.get_mut(&split).expect("every split has a pool").push(pair);
    }

    struct Drawn {
        extracted: usize,
        in_band: usize,
        sample: Vec<SiblingPair>,
    }
    let mut drawn: BTreeMap<Split, Drawn> = BTreeMap::new();
    for (&split, pool) in &pools {
        let keep: Vec<bool> = pool
            .par_iter()
            .map(|p| config.band.contains(levenshtein_ratio(&p.sentence1, &p.sentence2)))
            .collect();
        let in_band: Vec<&SiblingPair> = pool.iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect();
        let requested = config.sample_sizes.get(split);
        if in_band.len() < requested {
            return Err(DatasetError::InsufficientPairs { split, requested, available: in_band.len() });
        }
        let mut rng = rng_from(Fnv64::new().str("sample").str(split.name()).u64(config.seed).finish());
        let mut picks = index::sample(&mut rng, in_band.len(), requested).into_vec();
        picks.sort_unstable();
        let sample = picks.into_iter().map(|i| in_band[i].clone()).collect();
        drawn.insert(split, Drawn { extracted: pool.len(), in_band: in_band.len(), sample });
    }

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut summaries = BTreeMap::new();
    for (split, d) in drawn {
        let records: Vec<DatasetRecord> = d
            .sample
            .par_iter()
            .map(|p| {
                annotator
                    .annotate(&p.sentence1, &p.sentence2)
                    .map(|a| DatasetRecord {
                        sentence1: p.sentence1.clone(),
                        sentence2: p.sentence2.clone(),
                        reasoning_step: a.reasoning_step,
                        result: a.result,
                        split,
                        problem_id: p.problem_id.clone(),
                    })
                    .map_err(|source| DatasetError::Annotation { split, problem_id: p.problem_id.clone(), source })
            })
            .collect::<Result<_, _>>()?;
        let mut bytes = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut bytes, r).expect("record serializes");
            bytes.push(b'\n');
        }
        let path = out_dir.join(split.file_name());
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        summaries.insert(
            split,
            SplitSummary {
                problems: splits.values().filter(|&&s| s == split).count(),
                extracted_pairs: d.extracted,
                in_band_pairs: d.in_band,
                requested: config.sample_sizes.get(split),
                written: records.len(),
                sha256: sha256_hex(&bytes),
            },
        );
    }

    let manifest = DatasetManifest {
        seed: config.seed,
        band: config.band,
        split_ratios: config.split_ratios,
        sample_sizes: config.sample_sizes,
        harvest_policy: HARVEST_POLICY.into(),
        annotator: annotator.fingerprint(),
        traces: traces.len(),
        splits: summaries,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|source| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        if record.result > 4 {
            return Err(DatasetError::Config(format!("{} line {}: result {} > 4", path.display(), i + 1, record.result)));
        }
        out.push(record);
    }
    Ok(out)
}

//! Hashed n-gram features for a text pair.
//!
//! Each text is reduced to a multiset of character and word n-grams. The pair
//! is then described by up to four blocks computed from the two multisets:
//! the union, the intersection, the symmetric difference (plus counts of the
//! differing words by token class, so a changed number or operator is visible
//! independently of which number it was), and a one-hot bucket of the edit
//! ratio. Every block is symmetric in its two arguments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::textdist::levenshtein_ratio;
use crate::util::Fnv64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairFeature {
    Union,
    Intersection,
    SymmetricDiff,
    RatioBucket,
}

impl PairFeature {
    pub const ALL: [PairFeature; 4] =
        [PairFeature::Union, PairFeature::Intersection, PairFeature::SymmetricDiff, PairFeature::RatioBucket];

    pub fn bit(self) -> u32 {
        match self {
            PairFeature::Union => 1,
            PairFeature::Intersection => 2,
            PairFeature::SymmetricDiff => 4,
            PairFeature::RatioBucket => 8,
        }
    }

    fn tag(self) -> u64 {
        self.bit() as u64
    }
}

pub const MIN_HASH_DIM: usize = 1 << 10;
const RATIO_BUCKETS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub char_ngram_range: (usize, usize),
    pub word_ngram_range: (usize, usize),
    pub hash_dim: usize,
    pub pair_features: Vec<PairFeature>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            char_ngram_range: (2, 4),
            word_ngram_range: (1, 2),
            hash_dim: 1 << 18,
            pair_features: PairFeature::ALL.to_vec(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, (lo, hi)) in [("char_ngram_range", self.char_ngram_range), ("word_ngram_range", self.word_ngram_range)]
        {
            if lo == 0 || lo > hi {
                return Err(format!("{name} must satisfy 1 <= min <= max, got ({lo}, {hi})"));
            }
        }
        if !self.hash_dim.is_power_of_two() || self.hash_dim < MIN_HASH_DIM {
            return Err(format!("hash_dim must be a power of two >= {MIN_HASH_DIM}, got {}", self.hash_dim));
        }
        if self.hash_dim > u32::MAX as usize {
            return Err("hash_dim does not fit in 32 bits".into());
        }
        if self.pair_features.is_empty() {
            return Err("pair_features must not be empty".into());
        }
        Ok(())
    }

    pub fn feature_mask(&self) -> u32 {
        self.pair_features.iter().fold(0, |m, f| m | f.bit())
    }

    pub fn from_mask(mask: u32) -> Vec<PairFeature> {
        PairFeature::ALL.into_iter().filter(|f| mask & f.bit() != 0).collect()
    }

    fn has(&self, f: PairFeature) -> bool {
        self.pair_features.contains(&f)
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    fn from_map(map: BTreeMap<u32, f64>) -> Self {
        let (indices, values) = map.into_iter().filter(|(_, v)| *v != 0.0).unzip();
        SparseVector { indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| dense[i as usize] * v).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

/// Word tokens with trailing sentence punctuation removed.
pub fn word_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|w| w.trim_end_matches([',', '.', ';', ':', '!', '?']))
        .filter(|w| !w.is_empty())
        .collect()
}

/// The n-gram multiset of one text, keyed by stable hashes.
#[derive(Debug, Clone, Default)]
pub struct TextProfile<'a> {
    pub grams: BTreeMap<u64, u32>,
    pub words: BTreeMap<&'a str, u32>,
}

fn char_gram_key(gram: &[char]) -> u64 {
    gram.iter().fold(Fnv64::new().str("c"), |h, c| h.u64(*c as u64)).finish()
}

fn word_gram_key(gram: &[&str]) -> u64 {
    gram.iter().fold(Fnv64::new().str("w"), |h, w| h.str(w)).finish()
}

pub fn profile<'a>(text: &'a str, config: &FeatureConfig) -> TextProfile<'a> {
    let mut grams = BTreeMap::new();
    let chars: Vec<char> = std::iter::once(' ').chain(text.chars()).chain(std::iter::once(' ')).collect();
    let (cmin, cmax) = config.char_ngram_range;
    for n in cmin..=cmax {
        for w in chars.windows(n) {
            *grams.entry(char_gram_key(w)).or_insert(0) += 1;
        }
    }
    let tokens = word_tokens(text);
    let (wmin, wmax) = config.word_ngram_range;
    for n in wmin..=wmax {
        for w in tokens.windows(n) {
            *grams.entry(word_gram_key(w)).or_insert(0) += 1;
        }
    }
    let mut words = BTreeMap::new();
    for t in tokens {
        *words.entry(t).or_insert(0) += 1;
    }
    TextProfile { grams, words }
}

struct BlockBuilder {
    tag: u64,
    mask: u64,
    entries: Vec<(u32, f64)>,
}

impl BlockBuilder {
    fn new(feature: PairFeature, dim: usize) -> Self {
        BlockBuilder { tag: feature.tag(), mask: dim as u64 - 1, entries: Vec::new() }
    }

    fn index(&self, key: u64) -> u32 {
        (Fnv64::new().u64(self.tag).u64(key).finish() & self.mask) as u32
    }

    fn push(&mut self, key: u64, value: f64) {
        let idx = self.index(key);
        self.entries.push((idx, value));
    }

    fn normalize(&mut self) {
        let norm = self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut self.entries {
                e.1 /= norm;
            }
        }
    }
}

fn merged_keys<'m>(a: &'m BTreeMap<u64, u32>, b: &'m BTreeMap<u64, u32>) -> impl Iterator<Item = (u64, u32, u32)> + 'm {
    let mut keys: Vec<u64> = a.keys().chain(b.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter().map(move |k| (k, a.get(&k).copied().unwrap_or(0), b.get(&k).copied().unwrap_or(0)))
}

fn block(pa: &TextProfile, pb: &TextProfile, a: &str, b: &str, feature: PairFeature, dim: usize) -> BlockBuilder {
    let mut out = BlockBuilder::new(feature, dim);
    match feature {
        PairFeature::Union => {
            for (k, ca, cb) in merged_keys(&pa.grams, &pb.grams) {
                out.push(k, (1.0 + ca.max(cb) as f64).ln());
            }
            out.normalize();
        }
        PairFeature::Intersection => {
            for (k, ca, cb) in merged_keys(&pa.grams, &pb.grams) {
                if ca.min(cb) > 0 {
                    out.push(k, (1.0 + ca.min(cb) as f64).ln());
                }
            }
            out.normalize();
        }
        PairFeature::SymmetricDiff => {
            for (k, ca, cb) in merged_keys(&pa.grams, &pb.grams) {
                if ca != cb {
                    out.push(k, (1.0 + ca.abs_diff(cb) as f64).ln());
                }
            }
            out.normalize();
        }
        PairFeature::RatioBucket => {
            let r = levenshtein_ratio(a, b);
            let bucket = ((r * RATIO_BUCKETS as f64) as usize).min(RATIO_BUCKETS - 1);
            out.push(Fnv64::new().str("ratio").u64(bucket as u64).finish(), 1.0);
        }
    }
    out
}

fn assemble(blocks: impl IntoIterator<Item = BlockBuilder>) -> SparseVector {
    let mut map: BTreeMap<u32, f64> = BTreeMap::new();
    for b in blocks {
        // entries arrive in key order, so collisions sum in a fixed order
        for (i, v) in b.entries {
            *map.entry(i).or_insert(0.0) += v;
        }
    }
    SparseVector::from_map(map)
}

/// Hashed pair features under `config.pair_features`.
pub fn featurize(a: &str, b: &str, config: &FeatureConfig) -> SparseVector {
    let (pa, pb) = (profile(a, config), profile(b, config));
    let blocks: Vec<BlockBuilder> = PairFeature::ALL
        .into_iter()
        .filter(|f| config.has(*f))
        .map(|f| block(&pa, &pb, a, b, f, config.hash_dim))
        .collect();
    assemble(blocks)
}

/// A single block of the pair features, mostly for inspection and tests.
pub fn featurize_block(a: &str, b: &str, config: &FeatureConfig, feature: PairFeature) -> SparseVector {
    let (pa, pb) = (profile(a, config), profile(b, config));
    assemble([block(&pa, &pb, a, b, feature, config.hash_dim)])
}

//! Equivalence detection between sibling steps and representative selection.
//!
//! Detectors judge one unordered pair at a time. Grouping closes the pairwise
//! "equivalent" relation transitively with a union-find, so a sibling batch is
//! always partitioned into disjoint classes, and each class keeps exactly one
//! representative (highest generator score, earliest index on ties).

use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::CandidateStep;
use crate::textdist::{levenshtein_ratio_with, Normalization};

pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    /// Transport-level failure talking to an external detector. Retriable;
    /// carries no verdict.
    #[error("detector transport failure: {0}")]
    Transport(String),
    #[error("classifier unavailable: {0}")]
    Unavailable(String),
    #[error("detector requires nonempty texts")]
    EmptyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictSource {
    FastFilter,
    Classifier,
    Oracle,
    External,
}

/// Five-level equivalence judgment: 0 not equivalent .. 4 exactly equivalent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub level: u8,
    pub probability: f64,
    pub source: VerdictSource,
}

impl Verdict {
    pub fn new(level: u8, probability: f64, source: VerdictSource) -> Self {
        debug_assert!(level <= 4);
        Verdict { level: level.min(4), probability, source }
    }

    pub fn equivalent_rule(source: VerdictSource) -> Self {
        Verdict::new(4, 1.0, source)
    }

    pub fn distinct_rule(source: VerdictSource) -> Self {
        Verdict::new(0, 0.0, source)
    }

    /// Binary decision used at pruning time: levels 3 and 4 count as equivalent.
    #[inline]
    pub fn equivalent(&self) -> bool {
        self.level >= 3
    }
}

/// Pairwise equivalence judge. Implementations are immutable after
/// construction and safe to share across threads.
pub trait Detector: Send + Sync {
    fn detect(&self, a: &str, b: &str) -> Result<Verdict, DetectError>;

    fn name(&self) -> &str {
        "detector"
    }
}

impl<D: Detector + ?Sized> Detector for Arc<D> {
    fn detect(&self, a: &str, b: &str) -> Result<Verdict, DetectError> {
        (**self).detect(a, b)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

fn check_nonempty(a: &str, b: &str) -> Result<(), DetectError> {
    if a.is_empty() || b.is_empty() {
        Err(DetectError::EmptyText)
    } else {
        Ok(())
    }
}

/// Ground-truth detector: two texts are equivalent iff they map to the same
/// canonical form. Texts without a canonical form only match themselves.
pub struct OracleDetector<F> {
    canonicalize: F,
}

impl<F, K> OracleDetector<F>
where
    F: Fn(&str) -> Option<K> + Send + Sync,
    K: Eq + Hash,
{
    pub fn new(canonicalize: F) -> Self {
        OracleDetector { canonicalize }
    }
}

impl<F, K> Detector for OracleDetector<F>
where
    F: Fn(&str) -> Option<K> + Send + Sync,
    K: Eq + Hash,
{
    fn detect(&self, a: &str, b: &str) -> Result<Verdict, DetectError> {
        check_nonempty(a, b)?;
        if a == b {
            return Ok(Verdict::equivalent_rule(VerdictSource::Oracle));
        }
        let same = match ((self.canonicalize)(a), (self.canonicalize)(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        };
        Ok(if same {
            Verdict::equivalent_rule(VerdictSource::Oracle)
        } else {
            Verdict::distinct_rule(VerdictSource::Oracle)
        })
    }

    fn name(&self) -> &str {
        "oracle"
    }
}

/// Edit-ratio only: equivalent iff the ratio exceeds the threshold.
#[derive(Debug, Clone)]
pub struct RatioDetector {
    pub threshold: f64,
    pub normalization: Normalization,
}

impl RatioDetector {
    pub fn new(threshold: f64) -> Self {
        RatioDetector { threshold, normalization: Normalization::None }
    }
}

impl Detector for RatioDetector {
    fn detect(&self, a: &str, b: &str) -> Result<Verdict, DetectError> {
        check_nonempty(a, b)?;
        let r = levenshtein_ratio_with(a, b, self.normalization);
        Ok(if r > self.threshold {
            Verdict::new(4, r, VerdictSource::FastFilter)
        } else {
            Verdict::new(0, r, VerdictSource::FastFilter)
        })
    }

    fn name(&self) -> &str {
        "ratio"
    }
}

/// Probability-of-equivalence model behind the cascade's second stage.
pub trait PairScorer: Send + Sync {
    fn probability(&self, a: &str, b: &str) -> Result<f64, DetectError>;

    /// Source tag attached to verdicts derived from this scorer.
    fn source(&self) -> VerdictSource {
        VerdictSource::Classifier
    }
}

impl<S: PairScorer + ?Sized> PairScorer for Arc<S> {
    fn probability(&self, a: &str, b: &str) -> Result<f64, DetectError> {
        (**self).probability(a, b)
    }

    fn source(&self) -> VerdictSource {
        (**self).source()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeOutcome {
    pub verdict: Verdict,
    pub classifier_invoked: bool,
}

/// Two-stage check: pairs with ratio `<= ratio_threshold` are non-equivalent
/// without consulting the classifier; otherwise the classifier decides at
/// `decision_threshold`.
pub fn cascade_detect(
    a: &str,
    b: &str,
    ratio_threshold: f64,
    scorer: &dyn PairScorer,
    decision_threshold: f64,
) -> Result<CascadeOutcome, DetectError> {
    cascade_detect_with(a, b, ratio_threshold, scorer, decision_threshold, Normalization::None)
}

pub fn cascade_detect_with(
    a: &str,
    b: &str,
    ratio_threshold: f64,
    scorer: &dyn PairScorer,
    decision_threshold: f64,
    normalization: Normalization,
) -> Result<CascadeOutcome, DetectError> {
    let ratio = levenshtein_ratio_with(a, b, normalization);
    if ratio <= ratio_threshold {
        return Ok(CascadeOutcome {
            verdict: Verdict::distinct_rule(VerdictSource::FastFilter),
            classifier_invoked: false,
        });
    }
    let p = scorer.probability(a, b)?;
    let level = if p >= decision_threshold { 4 } else { 0 };
    Ok(CascadeOutcome { verdict: Verdict::new(level, p, scorer.source()), classifier_invoked: true })
}

/// [`cascade_detect`] packaged as a [`Detector`], counting classifier calls.
pub struct CascadeDetector {
    scorer: Arc<dyn PairScorer>,
    pub ratio_threshold: f64,
    pub decision_threshold: f64,
    pub normalization: Normalization,
    invocations: AtomicU64,
}

impl CascadeDetector {
    pub fn new(scorer: Arc<dyn PairScorer>, ratio_threshold: f64) -> Self {
        CascadeDetector {
            scorer,
            ratio_threshold,
            decision_threshold: DEFAULT_DECISION_THRESHOLD,
            normalization: Normalization::None,
            invocations: AtomicU64::new(0),
        }
    }

    pub fn with_decision_threshold(mut self, t: f64) -> Self {
        self.decision_threshold = t;
        self
    }

    pub fn classifier_invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }
}

impl Detector for CascadeDetector {
    fn detect(&self, a: &str, b: &str) -> Result<Verdict, DetectError> {
        check_nonempty(a, b)?;
        if a == b {
            return Ok(Verdict::equivalent_rule(VerdictSource::FastFilter));
        }
        let out = cascade_detect_with(
            a,
            b,
            self.ratio_threshold,
            self.scorer.as_ref(),
            self.decision_threshold,
            self.normalization,
        )?;
        if out.classifier_invoked {
            self.invocations.fetch_add(1, Ordering::Relaxed);
        }
        Ok(out.verdict)
    }

    fn name(&self) -> &str {
        "cascade"
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `true` if the two sets were distinct.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        true
    }

    pub fn same(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    /// Sets ordered by smallest member, members ascending.
    pub fn into_groups(mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut slot: Vec<Option<usize>> = vec![None; n];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            let r = self.find(i);
            match slot[r] {
                Some(g) => groups[g].push(i),
                None => {
                    slot[r] = Some(groups.len());
                    groups.push(vec![i]);
                }
            }
        }
        groups
    }
}

/// Partition of a sibling batch into equivalence classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceGrouping {
    pub groups: Vec<Vec<usize>>,
    /// Pairs the detector judged equivalent, `(i, j)` with `i < j`.
    pub equivalent_pairs: Vec<(usize, usize)>,
    pub detector_calls: usize,
    /// Pairs whose detection failed and were treated as non-equivalent.
    #[serde(default)]
    pub failed_pairs: Vec<(usize, usize)>,
}

impl EquivalenceGrouping {
    pub fn singletons(n: usize) -> Self {
        EquivalenceGrouping {
            groups: (0..n).map(|i| vec![i]).collect(),
            equivalent_pairs: Vec::new(),
            detector_calls: 0,
            failed_pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group index of every element.
    pub fn membership(&self) -> Vec<usize> {
        let mut m = vec![usize::MAX; self.len()];
        for (g, members) in self.groups.iter().enumerate() {
            for &i in members {
                m[i] = g;
            }
        }
        m
    }
}

#[derive(Debug, Error)]
#[error("equivalence detection failed on pair ({first}, {second}): {source}")]
pub struct GroupingError {
    pub first: usize,
    pub second: usize,
    #[source]
    pub source: DetectError,
}

/// Groups `n` items from a pairwise judge. Pairs whose items are already in
/// the same class are not re-judged, so the judge runs at most `C(n, 2)`
/// times.
pub fn group_pairs<E, F>(n: usize, mut judge: F) -> Result<EquivalenceGrouping, (usize, usize, E)>
where
    F: FnMut(usize, usize) -> Result<bool, E>,
{
    let mut uf = UnionFind::new(n);
    let mut equivalent_pairs = Vec::new();
    let mut calls = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if uf.same(i, j) {
                continue;
            }
            calls += 1;
            if judge(i, j).map_err(|e| (i, j, e))? {
                uf.union(i, j);
                equivalent_pairs.push((i, j));
            }
        }
    }
    Ok(EquivalenceGrouping {
        groups: uf.into_groups(),
        equivalent_pairs,
        detector_calls: calls,
        failed_pairs: Vec::new(),
    })
}

/// Groups a sibling batch; any detection error aborts with the failing pair.
pub fn group_candidates(
    candidates: &[CandidateStep],
    detector: &dyn Detector,
) -> Result<EquivalenceGrouping, GroupingError> {
    group_pairs(candidates.len(), |i, j| {
        detector.detect(&candidates[i].text, &candidates[j].text).map(|v| v.equivalent())
    })
    .map_err(|(first, second, source)| GroupingError { first, second, source })
}

/// Groups a sibling batch, treating failed detections as non-equivalent.
pub fn group_candidates_lenient(
    candidates: &[CandidateStep],
    detector: &dyn Detector,
) -> EquivalenceGrouping {
    let mut failed = Vec::new();
    let mut grouping = group_pairs::<(), _>(candidates.len(), |i, j| {
        match detector.detect(&candidates[i].text, &candidates[j].text) {
            Ok(v) => Ok(v.equivalent()),
            Err(e) => {
                log::warn!("detector failed on pair ({i}, {j}), treating as distinct: {e}");
                failed.push((i, j));
                Ok(false)
            }
        }
    })
    .unwrap_or_else(|_| unreachable!("lenient judge never fails"));
    grouping.failed_pairs = failed;
    grouping
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedLink {
    pub index: usize,
    pub representative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Retained indices in ascending order.
    pub retained: Vec<usize>,
    pub pruned: Vec<PrunedLink>,
    /// Representative of each group, aligned with `grouping.groups`.
    pub representatives: Vec<usize>,
}

/// Keeps one candidate per group: highest score, earliest index on ties.
/// Candidates without a score rank below any scored one.
pub fn select_representatives(grouping: &EquivalenceGrouping, candidates: &[CandidateStep]) -> Selection {
    let key = |i: usize| candidates[i].score.unwrap_or(f64::NEG_INFINITY);
    let mut representatives = Vec::with_capacity(grouping.groups.len());
    let mut pruned = Vec::new();
    for group in &grouping.groups {
        let mut best = group[0];
        for &i in &group[1..] {
            if key(i) > key(best) || (key(i) == key(best) && i < best) {
                best = i;
            }
        }
        representatives.push(best);
        pruned.extend(group.iter().filter(|&&i| i != best).map(|&i| PrunedLink { index: i, representative: best }));
    }
    let mut retained = representatives.clone();
    retained.sort_unstable();
    pruned.sort_unstable_by_key(|p| p.index);
    Selection { retained, pruned, representatives }
}

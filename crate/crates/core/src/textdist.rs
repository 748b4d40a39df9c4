//! Edit distance and normalized similarity ratio over Unicode scalar values.
//!
//! The ratio is `1 - d / max(|a|, |b|)` with unit costs, and is `1.0` for two
//! empty strings. Both the fast filter in the cascade detector and the dataset
//! band filter are expressed in terms of this ratio.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BandError {
    #[error("ratio band bounds must lie in [0, 1] with lo <= hi (got lo={lo}, hi={hi})")]
    Invalid { lo: f64, hi: f64 },
}

/// Inclusive interval of accepted similarity ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioBand {
    pub lo: f64,
    pub hi: f64,
}

impl RatioBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self, BandError> {
        let band = RatioBand { lo, hi };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<(), BandError> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if in_unit(self.lo) && in_unit(self.hi) && self.lo <= self.hi {
            Ok(())
        } else {
            Err(BandError::Invalid { lo: self.lo, hi: self.hi })
        }
    }

    #[inline]
    pub fn contains(&self, ratio: f64) -> bool {
        self.lo <= ratio && ratio <= self.hi
    }
}

impl Default for RatioBand {
    fn default() -> Self {
        RatioBand { lo: 0.75, hi: 0.99 }
    }
}

/// Optional preprocessing applied to both texts before comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Compare the raw text.
    #[default]
    None,
    /// Lowercase and collapse whitespace runs to a single space.
    LowercaseCollapseWhitespace,
}

impl Normalization {
    pub fn apply(self, text: &str) -> String {
        match self {
            Normalization::None => text.to_owned(),
            Normalization::LowercaseCollapseWhitespace => text
                .split_whitespace()
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Levenshtein distance with unit costs, single-row dynamic programming.
pub fn levenshtein_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    distance_chars(&a, &b)
}

fn distance_chars(a: &[char], b: &[char]) -> usize {
    // Keep the shorter sequence in the row.
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }

    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let above = row[j + 1];
            let cost = if lc == sc { diag } else { diag + 1 };
            row[j + 1] = cost.min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[short.len()]
}

/// Normalized similarity `1 - d / max(|a|, |b|)`; `1.0` when both are empty.
pub fn levenshtein_ratio(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - distance_chars(&a, &b) as f64 / longest as f64
}

pub fn levenshtein_ratio_with(a: &str, b: &str, norm: Normalization) -> f64 {
    match norm {
        Normalization::None => levenshtein_ratio(a, b),
        _ => levenshtein_ratio(&norm.apply(a), &norm.apply(b)),
    }
}

/// Keeps the pairs whose ratio falls inside `band` (both ends inclusive),
/// preserving input order.
pub fn band_filter<S: AsRef<str>>(pairs: Vec<(S, S)>, band: RatioBand) -> Vec<(S, S)> {
    band_filter_by(pairs, band, |(a, b)| (a.as_ref(), b.as_ref()))
}

/// Same as [`band_filter`] for items that expose their texts through a closure.
pub fn band_filter_by<T, F>(items: Vec<T>, band: RatioBand, texts: F) -> Vec<T>
where
    F: Fn(&T) -> (&str, &str),
{
    items
        .into_iter()
        .filter(|item| {
            let (a, b) = texts(item);
            band.contains(levenshtein_ratio(a, b))
        })
        .collect()
}

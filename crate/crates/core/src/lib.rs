//! Equivalence-pruned reasoning search.
//!
//! At every expansion point of an MCTS or step-level beam search, sibling
//! candidate steps that say the same thing are grouped and all but one
//! representative are pruned. The crate bundles the search engines, the
//! edit-ratio + classifier cascade that detects equivalence, the EM training
//! loop for that classifier, dataset construction, and benchmark reporting.

pub mod adapters;
pub mod classifier;
pub mod domain;
pub mod equiv;
pub mod metrics;
pub mod search;
pub mod textdist;
pub mod util;

pub use domain::{Algorithm, CandidateStep, ProblemInstance, SearchConfig};
pub use equiv::{Detector, Verdict, VerdictSource};
pub use metrics::{BenchReport, TokenLedger};

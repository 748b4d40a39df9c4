//! External-service clients, the synthetic domain, and the dataset pipeline.

pub mod dataset;
pub mod http;
pub mod judge;
pub mod llm;
pub mod synthetic;

pub use dataset::{
    assign_splits, build_dataset, extract_sibling_pairs, read_dataset, DatasetBuildConfig, DatasetError,
    DatasetManifest, DatasetRecord, SiblingPair, Split, SplitSizes,
};
pub use http::{ChatClient, EndpointConfig};
pub use judge::{
    render_judge_prompt, Annotation, Annotator, CachedAnnotator, JudgeClient, JudgeConfig,
    SyntheticJudge,
};
pub use llm::{LlmConfig, LlmGenerator, PrmClient, RemoteScorer};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected request with HTTP {status}: {excerpt}")]
    Http { status: u16, excerpt: String },
    #[error("malformed response ({message}): {excerpt}")]
    Parse { message: String, excerpt: String },
    #[error("annotation failed: {0}")]
    Annotation(String),
    #[error("configuration error: {0}")]
    Config(String),
}

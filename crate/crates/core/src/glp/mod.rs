//! Generative reranking: prompts over retrieved candidates, an LLM client
//! with a mock mode, answer parsing and fine-tune data export.

pub mod client;
pub mod finetune;
pub mod parse;
pub mod pipeline;
pub mod prompt;

use std::path::PathBuf;

use thiserror::Error;

use crate::eval::EvalError;
use crate::retrieve::RetrieveError;

pub use client::{query_key, HttpClient, LlmClient, LlmRequest, LlmResponse, MockOracle};
pub use finetune::{build_finetune_dataset, write_finetune, FinetuneConfig, FinetuneExport, FinetuneRecord, LoraSettings};
pub use parse::{normalize, parse_answer};
pub use pipeline::{run_glp, GlpRun, GlpSettings, QueryOutcome};
pub use prompt::{build_prompt, render_prompt, EmbeddingSlot, PromptInstance};

#[derive(Debug, Error)]
pub enum GlpError {
    #[error("prompt needs at least one candidate")]
    NoCandidates,
    #[error("missing embedding: {0}")]
    MissingEmbedding(String),
    #[error("label `{0}` appears twice among the prompt embeddings")]
    DuplicateLabel(String),
    #[error("{endpoint}: gave up after {attempts} attempts: {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("mock oracle: {0}")]
    Mock(String),
    #[error("validation split has {available} triples, {requested} requested")]
    TooFewTriples { requested: usize, available: usize },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

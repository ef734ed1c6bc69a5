//! Harness for generating natural-language descriptions of C/C++ code with
//! chat-completion models and scoring them against human references.
//!
//! The crate is organised as a linear flow:
//!
//! - [`corpus`]: load and validate the `(code, reference)` corpus.
//! - [`prompting`]: render generator and refiner prompts.
//! - [`client`]: talk to chat/embedding endpoints (HTTP or the offline mock).
//! - [`pipeline`]: generate-then-refine over the corpus × model grid.
//! - [`metrics`]: BLEU, ROUGE-L, METEOR, BERTScore and MAUVE.
//! - [`report`]: per-model summaries, correlations and plot-ready grids.
//! - [`config`] and [`commands`]: the declarative run config and CLI commands.

pub mod client;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod report;
mod util;

pub use client::{
    ChatBackend, ClientError, CompletionResult, DecodingParams, Embedder, EmbeddingMatrix,
    ModelEndpoint,
};
pub use corpus::{CodeExample, Corpus, CorpusError, Lang};
pub use metrics::{MetricConfig, MauveResult, ScoreCard, TokenSeq};
pub use pipeline::{GenerationRecord, RunArtifacts, RunConfig};
pub use prompting::{GuidancePoint, PromptBundle, PromptStyle};
pub use report::{EvaluationReport, ModelSummary};

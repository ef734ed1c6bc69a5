//! Sentence- and corpus-level text similarity metrics.
//!
//! All functions are pure. Scores are in `[0, 1]` except raw BERTScore
//! components, which are cosine similarities in `[-1, 1]`. Every
//! precision/recall/F formula treats `0/0` as `0`.

pub mod bertscore;
pub mod bleu;
pub mod kmeans;
pub mod mauve;
pub mod meteor;
pub mod rouge;
pub mod scorecard;
pub mod tokenize;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::client::ClientError;

pub use bertscore::{bert_score, IdfTable, Prf};
pub use bleu::{bleu, corpus_bleu, BleuSmoothing};
pub use mauve::{mauve, MauveResult};
pub use meteor::{meteor, Meteor};
pub use rouge::rouge_l;
pub use scorecard::{score_record, ScoreCard, Scorer};
pub use tokenize::{tokenize, TokenScheme, TokenSeq};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("candidate has no tokens")]
    EmptyCandidate,
    #[error("at least one reference is required")]
    NoReferences,
    #[error("text has no tokens")]
    EmptyText,
    #[error("cannot read synonym table {path}: {source}")]
    SynonymTable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding provider: {0}")]
    Provider(#[from] ClientError),
    #[error("MAUVE needs at least 2 texts per side (got {human} human, {model} model)")]
    InsufficientSamples { human: usize, model: usize },
    #[error("record {record} does not belong to example {example}")]
    IdMismatch { record: String, example: String },
    #[error("invalid metric config: {0}")]
    Config(String),
}

/// Number of k-means clusters for MAUVE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterCount {
    /// `max(2, (n_human + n_model) / 10)`.
    #[default]
    Auto,
    Fixed(usize),
}

impl ClusterCount {
    pub fn resolve(self, total_samples: usize) -> usize {
        match self {
            ClusterCount::Auto => (total_samples / 10).max(2),
            ClusterCount::Fixed(k) => k,
        }
    }
}

impl Serialize for ClusterCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ClusterCount::Auto => s.serialize_str("auto"),
            ClusterCount::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(k) => Ok(ClusterCount::Fixed(k as usize)),
            Repr::Text(s) if s.eq_ignore_ascii_case("auto") => Ok(ClusterCount::Auto),
            Repr::Text(s) => Err(serde::de::Error::custom(format!(
                "mauve_clusters must be an integer or \"auto\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// Mean of sentence-level BLEU over records.
    #[default]
    SentenceMean,
    /// Corpus-level BLEU over pooled n-gram statistics.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub bleu_max_n: usize,
    /// Defaults to uniform `1/bleu_max_n` when absent.
    pub bleu_weights: Option<Vec<f64>>,
    pub bleu_smoothing: BleuSmoothing,
    pub bleu_epsilon: f64,
    pub bleu_mode: BleuMode,
    pub rouge_beta: f64,
    pub meteor_alpha: f64,
    pub meteor_beta: f64,
    pub meteor_gamma: f64,
    pub meteor_stemming: bool,
    pub meteor_synonym_table: Option<PathBuf>,
    pub bertscore_idf: bool,
    pub bertscore_rescale: bool,
    /// Baseline `b` for rescaling, `(s - b) / (1 - b)`; required with rescale.
    pub bertscore_baseline: Option<f64>,
    pub mauve_clusters: ClusterCount,
    pub mauve_scaling_c: f64,
    pub mauve_frontier_points: usize,
    pub mauve_seed: u64,
    pub mauve_max_iter: usize,
    pub mauve_tolerance: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu_max_n: 4,
            bleu_weights: None,
            bleu_smoothing: BleuSmoothing::Epsilon,
            bleu_epsilon: 1e-9,
            bleu_mode: BleuMode::SentenceMean,
            rouge_beta: 1.2,
            meteor_alpha: 0.9,
            meteor_beta: 3.0,
            meteor_gamma: 0.5,
            meteor_stemming: true,
            meteor_synonym_table: None,
            bertscore_idf: false,
            bertscore_rescale: false,
            bertscore_baseline: None,
            mauve_clusters: ClusterCount::Auto,
            mauve_scaling_c: 5.0,
            mauve_frontier_points: 25,
            mauve_seed: 25,
            mauve_max_iter: 100,
            mauve_tolerance: 1e-6,
        }
    }
}

impl MetricConfig {
    pub fn weights(&self) -> Vec<f64> {
        self.bleu_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.bleu_max_n as f64; self.bleu_max_n])
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: String| Err(MetricError::Config(m));
        if self.bleu_max_n == 0 {
            return bad("bleu_max_n must be >= 1".into());
        }
        if let Some(w) = &self.bleu_weights {
            if w.len() != self.bleu_max_n {
                return bad(format!(
                    "bleu_weights has {} entries, bleu_max_n is {}",
                    w.len(),
                    self.bleu_max_n
                ));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad("bleu_weights must be non-negative".into());
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("bleu_weights must sum to 1".into());
            }
        }
        if !(self.bleu_epsilon > 0.0 && self.bleu_epsilon < 1.0) {
            return bad("bleu_epsilon must be in (0, 1)".into());
        }
        if !(self.rouge_beta.is_finite() && self.rouge_beta >= 0.0) {
            return bad("rouge_beta must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.meteor_alpha) {
            return bad("meteor_alpha must be in [0, 1]".into());
        }
        if !(self.meteor_beta.is_finite() && self.meteor_beta >= 0.0) {
            return bad("meteor_beta must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.meteor_gamma) {
            return bad("meteor_gamma must be in [0, 1]".into());
        }
        if self.bertscore_rescale {
            match self.bertscore_baseline {
                Some(b) if b.is_finite() && b < 1.0 => {}
                _ => return bad("bertscore_rescale needs bertscore_baseline < 1".into()),
            }
        }
        if let ClusterCount::Fixed(k) = self.mauve_clusters {
            if k < 1 {
                return bad("mauve_clusters must be >= 1".into());
            }
        }
        if !(self.mauve_scaling_c.is_finite() && self.mauve_scaling_c > 0.0) {
            return bad("mauve_scaling_c must be > 0".into());
        }
        if self.mauve_frontier_points == 0 {
            return bad("mauve_frontier_points must be >= 1".into());
        }
        if self.mauve_max_iter == 0 {
            return bad("mauve_max_iter must be >= 1".into());
        }
        Ok(())
    }
}

/// `num / den`, with `0/0 = 0`.
pub(crate) fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

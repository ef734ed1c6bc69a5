//! The TOML harness configuration.
//!
//! ```toml
//! corpus_path = "corpus.jsonl"
//! output_dir = "out"
//! seed = 7
//!
//! [[models]]
//! model_id = "qwen"
//! base_url = "http://localhost:8000/v1"
//! api_key_ref = "QWEN_API_KEY"
//!
//! [embedding]
//! model_id = "embedder"
//! base_url = "mock://embedder"
//!
//! [run]
//! style = "concise_one_line"
//! refine_iterations = 1
//!
//! [metrics]
//! rouge_beta = 1.2
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::ModelEndpoint;
use crate::metrics::MetricConfig;
use crate::pipeline::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_embedding() -> ModelEndpoint {
    ModelEndpoint::mock("embedder")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub corpus_path: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds corpus sampling and the offline mock backends.
    #[serde(default)]
    pub seed: u64,
    /// Score a deterministic sample of this many examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    pub models: Vec<ModelEndpoint>,
    #[serde(default = "default_embedding")]
    pub embedding: ModelEndpoint,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub sample: Option<usize>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
}

impl HarnessConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: HarnessConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.corpus_path.is_relative() {
            cfg.corpus_path = base.join(&cfg.corpus_path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(p) = &cfg.metrics.meteor_synonym_table {
            if p.is_relative() {
                cfg.metrics.meteor_synonym_table = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(id) = &o.run_id {
            self.run.run_id = id.clone();
        }
        if let Some(n) = o.sample {
            self.sample = Some(n);
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.parallelism {
            self.run.parallelism = p;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.models.is_empty() {
            return Err(invalid("models", "at least one model is required"));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, m) in self.models.iter().enumerate() {
            m.validate().map_err(|e| invalid(format!("models[{i}]"), e))?;
            if !seen.insert(m.model_id.as_str()) {
                return Err(invalid(
                    format!("models[{i}].model_id"),
                    format!("duplicate model id {:?}", m.model_id),
                ));
            }
        }
        self.embedding
            .validate()
            .map_err(|e| invalid("embedding", e))?;
        for (field, ep) in self
            .models
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("models[{i}].api_key_ref"), m))
            .chain(std::iter::once(("embedding.api_key_ref".to_string(), &self.embedding)))
        {
            if let Some(r) = &ep.api_key_ref {
                let ok = !r.is_empty()
                    && r.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                    && !r.starts_with(|c: char| c.is_ascii_digit());
                if !ok {
                    return Err(invalid(
                        field,
                        "must name an environment variable (letters, digits, _), not hold a key",
                    ));
                }
            }
        }
        if let Err((field, bound)) = self.run.decoding.validate() {
            return Err(invalid(format!("run.decoding.{field}"), bound));
        }
        if self.run.refine_iterations > crate::pipeline::MAX_REFINE_ITERATIONS {
            return Err(invalid(
                "run.refine_iterations",
                format!("must be <= {}", crate::pipeline::MAX_REFINE_ITERATIONS),
            ));
        }
        if self.run.parallelism == 0 {
            return Err(invalid("run.parallelism", "must be >= 1"));
        }
        if let Some(r) = &self.run.refiner {
            r.validate().map_err(|e| invalid("run.refiner", e))?;
        }
        self.run
            .guidance_points()
            .map_err(|e| invalid("run.guidance", e.to_string()))?;
        if !self.run.run_id.is_empty() && !valid_run_id(&self.run.run_id) {
            return Err(invalid(
                "run.run_id",
                "may only contain letters, digits, '-', '_' and '.'",
            ));
        }
        if self.sample == Some(0) {
            return Err(invalid("sample", "must be >= 1"));
        }
        self.metrics.validate().map_err(|e| match e {
            crate::metrics::MetricError::Config(m) => invalid("metrics", m),
            other => invalid("metrics", other.to_string()),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// `run-YYYYMMDD-HHMMSS` in UTC.
pub fn timestamp_run_id() -> String {
    chrono::Utc::now().format("run-%Y%m%d-%H%M%S").to_string()
}

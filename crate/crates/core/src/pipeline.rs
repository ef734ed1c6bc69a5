//! Two-stage generation over the corpus × model grid.
//!
//! Each cell gets one generator call and up to `refine_iterations` refiner
//! calls. Records are appended to `generations.jsonl` as cells finish, so an
//! interrupted run can be resumed with the same run id; at the end the log is
//! rewritten in corpus-major, model-minor order.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::client::{ChatBackend, ClientError, DecodingParams, ModelEndpoint};
use crate::corpus::{CodeExample, Corpus};
use crate::prompting::{
    build_generator_prompt, build_refiner_prompt, check_guidance_compliance, select_guidance,
    GuidancePoint, GuidanceViolation, PromptError, PromptStyle,
};
use crate::util::{normalize_whitespace, write_atomic};

pub const MAX_REFINE_ITERATIONS: u32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{example_id} × {model_id}: {source}")]
    Cell {
        example_id: String,
        model_id: String,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("corpus and model list must both be non-empty")]
    EmptyInput,
    #[error("run {run_id} already exists with a different {what}; use a new run id or --force")]
    ResumeMismatch { run_id: String, what: String },
    #[error("all {0} cells failed")]
    AllCellsFailed(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStop {
    /// Always run `refine_iterations` rounds.
    #[default]
    Fixed,
    /// Stop after a round whose output equals its input up to whitespace.
    StopWhenUnchanged,
}

fn default_guidance() -> Vec<String> {
    crate::prompting::builtin_guidance()
        .into_iter()
        .map(|g| g.key)
        .collect()
}

fn one() -> usize {
    1
}

fn one_iteration() -> u32 {
    1
}

fn default_style() -> PromptStyle {
    PromptStyle::ConciseOneLine
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_style")]
    pub style: PromptStyle,
    /// Guidance point keys, in prompt order.
    #[serde(default = "default_guidance")]
    pub guidance: Vec<String>,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default = "one_iteration")]
    pub refine_iterations: u32,
    #[serde(default)]
    pub refine_stop: RefineStop,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default)]
    pub run_id: String,
    /// Model for the refiner stage; the generating model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner: Option<ModelEndpoint>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            style: default_style(),
            guidance: default_guidance(),
            decoding: DecodingParams::default(),
            refine_iterations: 1,
            refine_stop: RefineStop::Fixed,
            parallelism: 1,
            run_id: String::new(),
            refiner: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.refine_iterations > MAX_REFINE_ITERATIONS {
            return Err(PipelineError::Config(format!(
                "refine_iterations must be <= {MAX_REFINE_ITERATIONS} (got {})",
                self.refine_iterations
            )));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be >= 1".into()));
        }
        if let Err((field, bound)) = self.decoding.validate() {
            return Err(PipelineError::Config(format!("decoding.{field} {bound}")));
        }
        if let Some(r) = &self.refiner {
            r.validate()
                .map_err(|e| PipelineError::Config(format!("refiner: {e}")))?;
        }
        self.guidance_points()?;
        Ok(())
    }

    pub fn guidance_points(&self) -> Result<Vec<GuidancePoint>, PipelineError> {
        Ok(select_guidance(&self.guidance)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub iteration: u32,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub example_id: String,
    pub model_id: String,
    pub style: PromptStyle,
    pub prompt_hash: String,
    pub initial_output: String,
    pub refinements: Vec<Refinement>,
    pub final_output: String,
    pub guidance_violations: Vec<GuidanceViolation>,
    /// Summed model latency over all calls, milliseconds.
    pub latency_total: u64,
    pub created_at: String,
    /// Set when a refinement call failed; earlier output was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_failure: Option<String>,
}

impl GenerationRecord {
    pub fn expected_final(&self) -> &str {
        self.refinements
            .last()
            .map_or(self.initial_output.as_str(), |r| r.output.as_str())
    }

    /// Last-refinement-wins and contiguous 1..k refinement indices.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.final_output != self.expected_final() {
            return Err(format!(
                "{}/{}: final_output is not the last output",
                self.example_id, self.model_id
            ));
        }
        for (i, r) in self.refinements.iter().enumerate() {
            if r.iteration as usize != i + 1 {
                return Err(format!(
                    "{}/{}: refinement {} has index {}",
                    self.example_id,
                    self.model_id,
                    i + 1,
                    r.iteration
                ));
            }
        }
        Ok(())
    }
}

/// A grid cell that produced no record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFailure {
    pub example_id: String,
    pub model_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<CellFailure>,
    pub config_snapshot: RunConfig,
    pub corpus_digest: String,
    /// Cells executed by this invocation (resumed cells excluded).
    pub executed: usize,
}

impl RunArtifacts {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// File layout of one run under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(output_dir: impl AsRef<Path>, run_id: &str) -> Self {
        Self {
            dir: output_dir.as_ref().join("runs").join(run_id),
        }
    }

    pub fn generations(&self) -> PathBuf {
        self.dir.join("generations.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn errors(&self) -> PathBuf {
        self.dir.join("errors.jsonl")
    }

    pub fn scores(&self) -> PathBuf {
        self.dir.join("scores.csv")
    }

    pub fn corpus_metrics(&self) -> PathBuf {
        self.dir.join("corpus_metrics.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn cell_err(ex: &CodeExample, endpoint: &ModelEndpoint) -> impl FnOnce(ClientError) -> PipelineError {
    let (example_id, model_id) = (ex.id.clone(), endpoint.model_id.clone());
    move |source| PipelineError::Cell {
        example_id,
        model_id,
        source,
    }
}

/// Stage one: the generator prompt, one completion, compliance check.
pub fn generate_initial(
    ex: &CodeExample,
    endpoint: &ModelEndpoint,
    cfg: &RunConfig,
    backend: &dyn ChatBackend,
) -> Result<GenerationRecord, PipelineError> {
    let guidance = cfg.guidance_points()?;
    let bundle = build_generator_prompt(cfg.style, &guidance, ex);
    let reply = backend
        .complete(endpoint, &bundle, &cfg.decoding)
        .map_err(cell_err(ex, endpoint))?;
    let text = reply.text.trim().to_string();
    Ok(GenerationRecord {
        example_id: ex.id.clone(),
        model_id: endpoint.model_id.clone(),
        style: cfg.style,
        prompt_hash: bundle.content_hash,
        guidance_violations: check_guidance_compliance(&text, &guidance, cfg.style),
        final_output: text.clone(),
        initial_output: text,
        refinements: Vec::new(),
        latency_total: reply.latency_ms,
        created_at: now(),
        refine_failure: None,
    })
}

/// Stage two: up to `cfg.refine_iterations` refiner rounds, each rewriting
/// the previous round's output. A failed call ends refinement and keeps the
/// last good output.
pub fn refine(
    mut rec: GenerationRecord,
    ex: &CodeExample,
    endpoint: &ModelEndpoint,
    cfg: &RunConfig,
    backend: &dyn ChatBackend,
) -> Result<GenerationRecord, PipelineError> {
    let guidance = cfg.guidance_points()?;
    let refiner = cfg.refiner.as_ref().unwrap_or(endpoint);
    let iterations = cfg.refine_iterations.min(MAX_REFINE_ITERATIONS);
    for iteration in 1..=iterations {
        let previous = rec.final_output.clone();
        let bundle = match build_refiner_prompt(ex, &previous, cfg.style, &guidance) {
            Ok(b) => b,
            Err(e) => {
                rec.refine_failure = Some(format!("iteration {iteration}: {e}"));
                break;
            }
        };
        match backend.complete(refiner, &bundle, &cfg.decoding) {
            Ok(reply) => {
                rec.latency_total += reply.latency_ms;
                let output = reply.text.trim().to_string();
                rec.refinements.push(Refinement {
                    iteration,
                    output: output.clone(),
                });
                rec.final_output = output;
                if cfg.refine_stop == RefineStop::StopWhenUnchanged
                    && normalize_whitespace(&rec.final_output) == normalize_whitespace(&previous)
                {
                    break;
                }
            }
            Err(e) => {
                log::warn!(
                    "{} × {}: refinement {iteration} failed: {e}",
                    rec.example_id,
                    rec.model_id
                );
                rec.refine_failure = Some(format!("iteration {iteration}: {e}"));
                break;
            }
        }
    }
    rec.guidance_violations = check_guidance_compliance(&rec.final_output, &guidance, cfg.style);
    Ok(rec)
}

fn run_cell(
    ex: &CodeExample,
    endpoint: &ModelEndpoint,
    cfg: &RunConfig,
    backend: &dyn ChatBackend,
) -> Result<GenerationRecord, PipelineError> {
    let rec = generate_initial(ex, endpoint, cfg, backend)?;
    refine(rec, ex, endpoint, cfg, backend)
}

/// What `config.json` pins for a run; resuming requires a match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub run: RunConfig,
    pub corpus_digest: String,
    pub models: Vec<ModelEndpoint>,
}

impl RunSnapshot {
    fn resume_key(&self) -> (RunConfig, &str) {
        // Parallelism does not change results.
        let mut run = self.run.clone();
        run.parallelism = 1;
        (run, &self.corpus_digest)
    }
}

/// Parse a run log. Unparseable lines (such as a line cut short by a
/// crash) are skipped with a warning.
pub fn load_records(path: &Path) -> Result<Vec<GenerationRecord>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GenerationRecord>(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}:{}: skipping unreadable record: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("record serializes"));
        s.push('\n');
    }
    s
}

enum Outcome {
    Done(GenerationRecord),
    Failed(CellFailure),
}

/// Run every (example, model) cell not already in the run log.
pub fn run_pipeline(
    corpus: &Corpus,
    endpoints: &[ModelEndpoint],
    cfg: &RunConfig,
    backend: &dyn ChatBackend,
    paths: &RunPaths,
) -> Result<RunArtifacts, PipelineError> {
    if corpus.is_empty() || endpoints.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    cfg.validate()?;
    fs::create_dir_all(&paths.dir).map_err(io_err(&paths.dir))?;

    let snapshot = RunSnapshot {
        run: cfg.clone(),
        corpus_digest: corpus.digest(),
        models: endpoints.to_vec(),
    };
    let config_path = paths.config();
    if config_path.exists() {
        let text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
        let old: RunSnapshot = serde_json::from_str(&text).map_err(|e| PipelineError::Io {
            path: config_path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        let what = if old.corpus_digest != snapshot.corpus_digest {
            Some("corpus")
        } else if old.resume_key() != snapshot.resume_key() {
            Some("run configuration")
        } else {
            None
        };
        if let Some(what) = what {
            return Err(PipelineError::ResumeMismatch {
                run_id: cfg.run_id.clone(),
                what: what.into(),
            });
        }
    }
    let mut snap_json = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
    snap_json.push('\n');
    write_atomic(&config_path, snap_json.as_bytes()).map_err(io_err(&config_path))?;

    let ex_index: HashMap<&str, usize> =
        corpus.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let model_index: HashMap<&str, usize> = endpoints
        .iter()
        .enumerate()
        .map(|(i, e)| (e.model_id.as_str(), i))
        .collect();
    let order = |ex: &str, model: &str| (ex_index[ex], model_index[model]);

    let log_path = paths.generations();
    let mut records: Vec<GenerationRecord> = Vec::new();
    if log_path.exists() {
        let mut seen = HashSet::new();
        for r in load_records(&log_path)? {
            let in_grid = ex_index.contains_key(r.example_id.as_str())
                && model_index.contains_key(r.model_id.as_str());
            if !in_grid {
                log::warn!("dropping record outside the grid: {} × {}", r.example_id, r.model_id);
            } else if seen.insert((r.example_id.clone(), r.model_id.clone())) {
                records.push(r);
            }
        }
    }
    let done: HashSet<(String, String)> = records
        .iter()
        .map(|r| (r.example_id.clone(), r.model_id.clone()))
        .collect();
    let todo: Vec<(&CodeExample, &ModelEndpoint)> = corpus
        .iter()
        .flat_map(|ex| endpoints.iter().map(move |m| (ex, m)))
        .filter(|(ex, m)| !done.contains(&(ex.id.clone(), m.model_id.clone())))
        .collect();
    if !records.is_empty() {
        log::info!("resuming: {} cells done, {} to run", records.len(), todo.len());
    }

    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut failures: Vec<CellFailure> = Vec::new();
    let next = AtomicUsize::new(0);
    let workers = cfg.parallelism.min(todo.len()).max(1);
    let (tx, rx) = mpsc::channel::<Outcome>();

    let mut write_result: Result<(), PipelineError> = Ok(());
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next) = (&todo, &next);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((ex, m)) = todo.get(i) else { break };
                let outcome = match run_cell(ex, m, cfg, backend) {
                    Ok(r) => Outcome::Done(r),
                    Err(e) => Outcome::Failed(CellFailure {
                        example_id: ex.id.clone(),
                        model_id: m.model_id.clone(),
                        error: match e {
                            PipelineError::Cell { source, .. } => source.to_string(),
                            other => other.to_string(),
                        },
                    }),
                };
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: only this thread touches the run log.
        for outcome in rx {
            match outcome {
                Outcome::Done(rec) => {
                    if write_result.is_ok() {
                        let mut line = serde_json::to_string(&rec).expect("record serializes");
                        line.push('\n');
                        write_result = log_file
                            .write_all(line.as_bytes())
                            .and_then(|_| log_file.flush())
                            .map_err(io_err(&log_path));
                    }
                    records.push(rec);
                }
                Outcome::Failed(f) => {
                    log::warn!("{} × {} failed: {}", f.example_id, f.model_id, f.error);
                    failures.push(f);
                }
            }
        }
    });
    write_result?;
    drop(log_file);

    records.sort_by_key(|r| order(&r.example_id, &r.model_id));
    failures.sort_by_key(|f| order(&f.example_id, &f.model_id));
    write_atomic(&log_path, to_jsonl(&records).as_bytes()).map_err(io_err(&log_path))?;
    let err_path = paths.errors();
    write_atomic(&err_path, to_jsonl(&failures).as_bytes()).map_err(io_err(&err_path))?;

    if records.is_empty() {
        return Err(PipelineError::AllCellsFailed(failures.len()));
    }
    Ok(RunArtifacts {
        records,
        failures,
        config_snapshot: cfg.clone(),
        corpus_digest: snapshot.corpus_digest,
        executed: todo.len(),
    })
}

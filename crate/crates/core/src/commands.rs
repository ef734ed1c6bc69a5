//! The `validate`, `generate`, `score`, `report` and `run` commands.
//!
//! Results meant for people go to stdout, diagnostics to stderr (through
//! `log`), and machine artifacts only to files under
//! `{output_dir}/runs/{run_id}/`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::client::{embedder_for, Backend, ChatBackend, Embedder};
use crate::config::{timestamp_run_id, valid_run_id, HarnessConfig, Overrides};
use crate::corpus::{corpus_stats, load_corpus_checked, sample_corpus, Corpus};
use crate::metrics::bleu::{bleu_from_stats, bleu_stats, BleuStats};
use crate::metrics::{
    mauve, tokenize, BleuMode, IdfTable, MetricConfig, ScoreCard, Scorer, TokenScheme,
};
use crate::pipeline::{load_records, run_pipeline, CellFailure, GenerationRecord, PipelineError, RunPaths};
use crate::report::{build_report, comparison_table, export_report, parse_scores_csv, scores_csv, ReportOptions};
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExitStatus {
    Success = 0,
    Partial = 1,
    ConfigError = 2,
    Fatal = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct CommandOptions {
    pub overrides: Overrides,
    pub force: bool,
}

/// A loaded, validated configuration with its corpus.
struct Context {
    cfg: HarnessConfig,
    corpus: Corpus,
}

fn config_error(e: impl std::fmt::Display) -> ExitStatus {
    eprintln!("error: {e}");
    ExitStatus::ConfigError
}

fn fatal(e: impl std::fmt::Display) -> ExitStatus {
    eprintln!("error: {e}");
    ExitStatus::Fatal
}

fn load_context(config_path: &Path, opts: &CommandOptions) -> Result<Context, ExitStatus> {
    let mut cfg = HarnessConfig::load(config_path).map_err(config_error)?;
    cfg.apply(&opts.overrides);
    cfg.validate().map_err(config_error)?;
    let (corpus, warnings) = load_corpus_checked(&cfg.corpus_path).map_err(config_error)?;
    for w in &warnings {
        log::warn!("{}: {w}", cfg.corpus_path.display());
    }
    if corpus.is_empty() {
        return Err(config_error(format!(
            "corpus {} has no valid examples",
            cfg.corpus_path.display()
        )));
    }
    let corpus = match cfg.sample {
        Some(n) => sample_corpus(&corpus, n, cfg.seed).map_err(config_error)?,
        None => corpus,
    };
    Ok(Context { cfg, corpus })
}

/// The run id from flags or config; else the newest run under the output
/// directory when `existing` is set, else a fresh timestamp.
fn resolve_run_id(cfg: &HarnessConfig, existing: bool) -> Result<String, ExitStatus> {
    if !cfg.run.run_id.is_empty() {
        return Ok(cfg.run.run_id.clone());
    }
    if !existing {
        return Ok(timestamp_run_id());
    }
    let runs = cfg.output_dir.join("runs");
    let newest = fs::read_dir(&runs)
        .ok()
        .into_iter()
        .flatten()
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| valid_run_id(n))
        .max();
    newest.ok_or_else(|| config_error(format!("no runs found under {}; pass --run-id", runs.display())))
}

pub fn cmd_validate(config_path: &Path, opts: &CommandOptions) -> ExitStatus {
    let ctx = match load_context(config_path, opts) {
        Ok(c) => c,
        Err(s) => return s,
    };
    println!("config: {}", config_path.display());
    println!("corpus: {}", ctx.cfg.corpus_path.display());
    println!("{}", corpus_stats(&ctx.corpus));
    println!();
    println!("# resolved configuration");
    print!("{}", ctx.cfg.to_toml());
    ExitStatus::Success
}

fn generate_with(ctx: &Context, run_id: &str, opts: &CommandOptions, backend: &dyn ChatBackend) -> ExitStatus {
    let paths = RunPaths::new(&ctx.cfg.output_dir, run_id);
    if opts.force && paths.dir.exists() {
        if let Err(e) = fs::remove_dir_all(&paths.dir) {
            return fatal(format!("{}: {e}", paths.dir.display()));
        }
    }
    let mut run = ctx.cfg.run.clone();
    run.run_id = run_id.to_string();
    match run_pipeline(&ctx.corpus, &ctx.cfg.models, &run, backend, &paths) {
        Ok(a) => {
            println!(
                "run {run_id}: {} records, {} failed cells, {} executed now -> {}",
                a.records.len(),
                a.failures.len(),
                a.executed,
                paths.generations().display()
            );
            if a.is_complete() {
                ExitStatus::Success
            } else {
                ExitStatus::Partial
            }
        }
        Err(e @ (PipelineError::ResumeMismatch { .. } | PipelineError::Config(_) | PipelineError::Prompt(_))) => {
            config_error(e)
        }
        Err(e) => fatal(e),
    }
}

pub fn cmd_generate(config_path: &Path, opts: &CommandOptions) -> ExitStatus {
    let ctx = match load_context(config_path, opts) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let run_id = match resolve_run_id(&ctx.cfg, false) {
        Ok(r) => r,
        Err(s) => return s,
    };
    let backend = Backend::new(ctx.cfg.seed);
    generate_with(&ctx, &run_id, opts, &backend)
}

/// Corpus-level values per model, written next to `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    /// Digest of the inputs the scores were computed from.
    pub stamp: String,
    pub models: BTreeMap<String, ModelCorpusMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCorpusMetrics {
    pub records: usize,
    pub mauve: Option<f64>,
    pub mauve_clusters: Option<usize>,
    pub corpus_bleu: Option<f64>,
}

fn read_failures(path: &Path) -> Vec<CellFailure> {
    fs::read_to_string(path)
        .map(|t| {
            t.lines()
                .filter_map(|l| serde_json::from_str::<CellFailure>(l).ok())
                .collect()
        })
        .unwrap_or_default()
}

fn score_stamp(generations: &[u8], metrics: &MetricConfig, corpus_digest: &str) -> String {
    let mut buf = generations.to_vec();
    buf.extend_from_slice(serde_json::to_string(metrics).expect("metrics serialize").as_bytes());
    buf.extend_from_slice(corpus_digest.as_bytes());
    sha256_hex(&buf)
}

fn score_cards(
    records: &[GenerationRecord],
    corpus: &Corpus,
    scorer: &Scorer,
    parallelism: usize,
) -> Vec<Option<ScoreCard>> {
    let index: HashMap<&str, usize> = corpus.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let score_one = |r: &GenerationRecord| -> Option<ScoreCard> {
        let Some(&i) = index.get(r.example_id.as_str()) else {
            log::warn!("record {} × {} has no example in the corpus", r.example_id, r.model_id);
            return None;
        };
        match scorer.score(r, &corpus.examples[i]) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("{} × {}: not scored: {e}", r.example_id, r.model_id);
                None
            }
        }
    };
    let chunk = records.len().div_ceil(parallelism.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(score_one).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    })
}

fn corpus_metrics(
    cards: &[ScoreCard],
    records: &[GenerationRecord],
    corpus: &Corpus,
    cfg: &MetricConfig,
    embedder: &dyn Embedder,
    models: &[String],
    stamp: String,
) -> CorpusMetrics {
    let mut out = BTreeMap::new();
    for model in models {
        let scored: Vec<&GenerationRecord> = records
            .iter()
            .filter(|r| &r.model_id == model)
            .filter(|r| cards.iter().any(|c| c.model_id == r.model_id && c.example_id == r.example_id))
            .collect();
        if scored.is_empty() {
            continue;
        }
        let pairs: Vec<(&str, &str)> = scored
            .iter()
            .filter_map(|r| {
                let ex = corpus.get(&r.example_id)?;
                (!r.final_output.trim().is_empty()).then_some((ex.reference.as_str(), r.final_output.as_str()))
            })
            .collect();
        let human: Vec<String> = pairs.iter().map(|(h, _)| h.to_string()).collect();
        let machine: Vec<String> = pairs.iter().map(|(_, m)| m.to_string()).collect();
        let (score, clusters) = match mauve(&human, &machine, embedder, cfg) {
            Ok(m) => (Some(m.score), Some(m.cluster_count)),
            Err(e) => {
                log::warn!("{model}: MAUVE unavailable: {e}");
                (None, None)
            }
        };
        let corpus_bleu = (cfg.bleu_mode == BleuMode::Corpus).then(|| {
            let mut total = BleuStats {
                matches: vec![0; cfg.bleu_max_n],
                totals: vec![0; cfg.bleu_max_n],
                ..Default::default()
            };
            for (h, m) in &pairs {
                let refs = [tokenize(h, TokenScheme::Default)];
                total.add(&bleu_stats(&tokenize(m, TokenScheme::Default), &refs, cfg.bleu_max_n));
            }
            bleu_from_stats(&total, &cfg.weights(), cfg.bleu_smoothing, cfg.bleu_epsilon)
        });
        out.insert(
            model.clone(),
            ModelCorpusMetrics {
                records: scored.len(),
                mauve: score,
                mauve_clusters: clusters,
                corpus_bleu,
            },
        );
    }
    CorpusMetrics { stamp, models: out }
}

fn score_with(ctx: &Context, run_id: &str, opts: &CommandOptions, embedder: Arc<dyn Embedder>) -> ExitStatus {
    let paths = RunPaths::new(&ctx.cfg.output_dir, run_id);
    let gen_path = paths.generations();
    let gen_bytes = match fs::read(&gen_path) {
        Ok(b) => b,
        Err(e) => return config_error(format!("run {run_id}: cannot read {}: {e}", gen_path.display())),
    };
    let failures = read_failures(&paths.errors());
    for f in &failures {
        eprintln!("note: {} × {} has no record ({})", f.example_id, f.model_id, f.error);
    }
    let partial_status = if failures.is_empty() {
        ExitStatus::Success
    } else {
        ExitStatus::Partial
    };
    let stamp = score_stamp(&gen_bytes, &ctx.cfg.metrics, &ctx.corpus.digest());
    if !opts.force && paths.scores().exists() {
        let current = fs::read_to_string(paths.corpus_metrics())
            .ok()
            .and_then(|t| serde_json::from_str::<CorpusMetrics>(&t).ok());
        if current.is_some_and(|c| c.stamp == stamp) {
            println!("run {run_id}: scores are up to date ({})", paths.scores().display());
            return partial_status;
        }
    }
    let records = match load_records(&gen_path) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    if records.is_empty() {
        return config_error(format!("run {run_id}: {} has no records", gen_path.display()));
    }
    let mut scorer = match Scorer::new(ctx.cfg.metrics.clone(), embedder.clone()) {
        Ok(s) => s,
        Err(e) => return config_error(e),
    };
    if ctx.cfg.metrics.bertscore_idf {
        let refs: Vec<_> = ctx.corpus.iter().map(|e| tokenize(&e.reference, TokenScheme::Default)).collect();
        scorer = scorer.with_idf(IdfTable::from_references(&refs));
    }
    let results = score_cards(&records, &ctx.corpus, &scorer, ctx.cfg.run.parallelism);
    let unscored = results.iter().filter(|c| c.is_none()).count();
    let cards: Vec<ScoreCard> = results.into_iter().flatten().collect();
    if cards.is_empty() {
        return fatal(format!("run {run_id}: no record could be scored"));
    }
    let models: Vec<String> = ctx.cfg.models.iter().map(|m| m.model_id.clone()).collect();
    let cm = corpus_metrics(&cards, &records, &ctx.corpus, &ctx.cfg.metrics, embedder.as_ref(), &models, stamp);
    let mut cm_json = serde_json::to_string_pretty(&cm).expect("metrics serialize");
    cm_json.push('\n');
    for (path, body) in [(paths.scores(), scores_csv(&cards)), (paths.corpus_metrics(), cm_json)] {
        if let Err(e) = write_atomic(&path, body.as_bytes()) {
            return fatal(format!("{}: {e}", path.display()));
        }
    }
    println!("run {run_id}: scored {} records -> {}", cards.len(), paths.scores().display());
    for (model, m) in &cm.models {
        match m.mauve {
            Some(v) => println!("  {model}: MAUVE {v:.4} ({} clusters)", m.mauve_clusters.unwrap_or(0)),
            None => println!("  {model}: MAUVE n/a"),
        }
    }
    if unscored > 0 {
        eprintln!("note: {unscored} records could not be scored");
        return ExitStatus::Partial;
    }
    partial_status
}

pub fn cmd_score(config_path: &Path, opts: &CommandOptions) -> ExitStatus {
    let ctx = match load_context(config_path, opts) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let run_id = match resolve_run_id(&ctx.cfg, true) {
        Ok(r) => r,
        Err(s) => return s,
    };
    let embedder = embedder_for(&ctx.cfg.embedding, ctx.cfg.seed);
    score_with(&ctx, &run_id, opts, embedder)
}

fn report_with(cfg: &HarnessConfig, run_id: &str) -> ExitStatus {
    let paths = RunPaths::new(&cfg.output_dir, run_id);
    let text = match fs::read_to_string(paths.scores()) {
        Ok(t) => t,
        Err(e) => return config_error(format!("run {run_id}: cannot read {}: {e}", paths.scores().display())),
    };
    let cards = match parse_scores_csv(&text) {
        Ok(c) => c,
        Err(e) => return config_error(format!("{}: {e}", paths.scores().display())),
    };
    if cards.is_empty() {
        return config_error(format!("{} has no scores", paths.scores().display()));
    }
    let cm: Option<CorpusMetrics> = fs::read_to_string(paths.corpus_metrics())
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let mut opts = ReportOptions {
        model_order: cfg.models.iter().map(|m| m.model_id.clone()).collect(),
        ..Default::default()
    };
    if let Some(cm) = &cm {
        for (model, m) in &cm.models {
            if let Some(v) = m.mauve {
                opts.mauve.insert(model.clone(), v);
            }
            if let Some(b) = m.corpus_bleu {
                opts.bleu_override.insert(model.clone(), b);
            }
        }
    }
    let report = match build_report(run_id, &cards, &opts) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    let out_dir = paths.report_dir();
    match export_report(&report, &out_dir) {
        Ok(files) => {
            print!("{}", comparison_table(&report.summaries, None).to_text());
            let mauve: Vec<String> = report
                .summaries
                .iter()
                .filter_map(|s| s.mauve.map(|m| format!("{} {m:.4}", s.model_id)))
                .collect();
            if !mauve.is_empty() {
                println!("\nMAUVE (corpus level): {}", mauve.join(", "));
            }
            println!("\n{} report files in {}", files.len(), out_dir.display());
            ExitStatus::Success
        }
        Err(e) => fatal(e),
    }
}

pub fn cmd_report(config_path: &Path, opts: &CommandOptions) -> ExitStatus {
    let mut cfg = match HarnessConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    cfg.apply(&opts.overrides);
    if let Err(e) = cfg.validate() {
        return config_error(e);
    }
    let run_id = match resolve_run_id(&cfg, true) {
        Ok(r) => r,
        Err(s) => return s,
    };
    report_with(&cfg, &run_id)
}

/// Validate, generate, score and report in sequence with injected backends.
pub fn run_with(
    config_path: &Path,
    opts: &CommandOptions,
    backend: &dyn ChatBackend,
    embedder: Option<Arc<dyn Embedder>>,
) -> ExitStatus {
    let ctx = match load_context(config_path, opts) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let run_id = match resolve_run_id(&ctx.cfg, false) {
        Ok(r) => r,
        Err(s) => return s,
    };
    let mut worst = generate_with(&ctx, &run_id, opts, backend);
    if worst >= ExitStatus::ConfigError {
        return worst;
    }
    let embedder = embedder.unwrap_or_else(|| embedder_for(&ctx.cfg.embedding, ctx.cfg.seed));
    let s = score_with(&ctx, &run_id, opts, embedder);
    if s >= ExitStatus::ConfigError {
        return s;
    }
    worst = worst.max(s);
    let r = report_with(&ctx.cfg, &run_id);
    if r >= ExitStatus::ConfigError {
        return r;
    }
    worst.max(r)
}

pub fn cmd_run(config_path: &Path, opts: &CommandOptions) -> ExitStatus {
    let seed = match HarnessConfig::load(config_path) {
        Ok(mut c) => {
            c.apply(&opts.overrides);
            c.seed
        }
        Err(e) => return config_error(e),
    };
    run_with(config_path, opts, &Backend::new(seed), None)
}

/// Resolve `path` to the run directory a command would use, for callers
/// that need to locate artifacts.
pub fn run_dir(cfg: &HarnessConfig, run_id: &str) -> PathBuf {
    RunPaths::new(&cfg.output_dir, run_id).dir
}

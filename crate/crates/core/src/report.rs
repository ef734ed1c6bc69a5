//! Per-model summaries and plot-ready comparison artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::scorecard::split_csv_line;
use crate::metrics::ScoreCard;
use crate::util::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no score cards to aggregate")]
    EmptyInput,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    RougeLF,
    Meteor,
    BertF,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bleu, Metric::RougeLF, Metric::Meteor, Metric::BertF];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Bleu => "BLEU",
            Metric::RougeLF => "ROUGE-L (F)",
            Metric::Meteor => "METEOR",
            Metric::BertF => "BERTScore",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::RougeLF => "rouge_l_f",
            Metric::Meteor => "meteor",
            Metric::BertF => "bert_f",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key().eq_ignore_ascii_case(s) || m.label().eq_ignore_ascii_case(s))
    }

    fn of_card(self, c: &ScoreCard) -> Option<f64> {
        match self {
            Metric::Bleu => Some(c.bleu),
            Metric::RougeLF => Some(c.rouge_l.f),
            Metric::Meteor => Some(c.meteor),
            Metric::BertF => c.bertscore.map(|b| b.f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub mean_bleu: f64,
    pub mean_rouge_l_f: f64,
    pub mean_meteor: f64,
    /// Mean over the records that have a BERTScore; `None` if none do.
    pub mean_bert_f: Option<f64>,
    pub record_count: usize,
    pub bert_count: usize,
    pub mauve: Option<f64>,
}

impl ModelSummary {
    pub fn value(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Bleu => Some(self.mean_bleu),
            Metric::RougeLF => Some(self.mean_rouge_l_f),
            Metric::Meteor => Some(self.mean_meteor),
            Metric::BertF => self.mean_bert_f,
        }
    }
}

/// Mean that does not depend on the order of `values`.
fn stable_mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-model means, models ordered by id. A missing BERTScore excludes the
/// record from that mean only.
pub fn aggregate(cards: &[ScoreCard]) -> Result<Vec<ModelSummary>, ReportError> {
    if cards.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut by_model: BTreeMap<&str, Vec<&ScoreCard>> = BTreeMap::new();
    for c in cards {
        by_model.entry(&c.model_id).or_default().push(c);
    }
    Ok(by_model
        .into_iter()
        .map(|(model, cs)| {
            let col = |m: Metric| -> Vec<f64> { cs.iter().filter_map(|c| m.of_card(c)).collect() };
            let mut bert = col(Metric::BertF);
            ModelSummary {
                model_id: model.to_string(),
                mean_bleu: stable_mean(&mut col(Metric::Bleu)).unwrap_or(0.0),
                mean_rouge_l_f: stable_mean(&mut col(Metric::RougeLF)).unwrap_or(0.0),
                mean_meteor: stable_mean(&mut col(Metric::Meteor)).unwrap_or(0.0),
                bert_count: bert.len(),
                mean_bert_f: stable_mean(&mut bert),
                record_count: cs.len(),
                mauve: None,
            }
        })
        .collect())
}

/// Reorder summaries to follow `ids`; unknown models go last, by id.
pub fn order_summaries(summaries: &mut [ModelSummary], ids: &[String]) {
    summaries.sort_by_key(|s| {
        (
            ids.iter().position(|i| *i == s.model_id).unwrap_or(usize::MAX),
            s.model_id.clone(),
        )
    });
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// The model comparison table, 4 decimals. Rows keep input order unless
/// `sort_by` is given, which sorts descending on that metric (stable).
pub fn comparison_table(summaries: &[ModelSummary], sort_by: Option<Metric>) -> ComparisonTable {
    let mut ordered: Vec<&ModelSummary> = summaries.iter().collect();
    if let Some(m) = sort_by {
        ordered.sort_by(|a, b| {
            let (x, y) = (a.value(m).unwrap_or(f64::NEG_INFINITY), b.value(m).unwrap_or(f64::NEG_INFINITY));
            y.total_cmp(&x)
        });
    }
    let mut headers = vec!["Model".to_string()];
    headers.extend(Metric::ALL.iter().map(|m| m.label().to_string()));
    let rows = ordered
        .iter()
        .map(|s| {
            let mut r = vec![s.model_id.clone()];
            r.extend(Metric::ALL.iter().map(|m| cell(s.value(*m))));
            r
        })
        .collect();
    ComparisonTable { headers, rows }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "  {c:>w$}");
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in std::iter::once(&self.headers).chain(&self.rows) {
            let cells: Vec<String> = r.iter().map(|c| csv_escape(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Parse a comparison-table CSV back into `(model, values)` rows.
pub fn parse_comparison_csv(text: &str) -> Result<Vec<(String, [Option<f64>; 4])>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty table")?;
    if split_csv_line(header).len() != 5 {
        return Err(format!("bad header {header:?}"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cols = split_csv_line(l);
            if cols.len() != 5 {
                return Err(format!("bad row {l:?}"));
            }
            let mut vals = [None; 4];
            for (v, c) in vals.iter_mut().zip(&cols[1..]) {
                if c != "n/a" {
                    *v = Some(c.parse::<f64>().map_err(|e| format!("{c:?}: {e}"))?);
                }
            }
            Ok((cols[0].clone(), vals))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub metric_names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Pearson r; a constant column correlates 0 with everything else.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pooled Pearson correlations between the four record-level metrics over
/// cards that have every field.
pub fn metric_correlations(cards: &[ScoreCard]) -> Result<CorrelationMatrix, ReportError> {
    let complete: Vec<&ScoreCard> = cards.iter().filter(|c| c.bertscore.is_some()).collect();
    if complete.len() < 2 {
        return Err(ReportError::InsufficientData(format!(
            "correlations need 2 complete score cards, have {}",
            complete.len()
        )));
    }
    let cols: Vec<Vec<f64>> = Metric::ALL
        .iter()
        .map(|m| complete.iter().map(|c| m.of_card(c).unwrap_or(0.0)).collect())
        .collect();
    let k = cols.len();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let r = pearson(&cols[i], &cols[j]);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        metric_names: Metric::ALL.iter().map(|m| m.key().to_string()).collect(),
        values,
    })
}

/// Correlations within each model separately; models with fewer than two
/// complete cards are left out.
pub fn metric_correlations_by_model(cards: &[ScoreCard]) -> BTreeMap<String, CorrelationMatrix> {
    let mut by_model: BTreeMap<String, Vec<ScoreCard>> = BTreeMap::new();
    for c in cards {
        by_model.entry(c.model_id.clone()).or_default().push(c.clone());
    }
    by_model
        .into_iter()
        .filter_map(|(m, cs)| metric_correlations(&cs).ok().map(|c| (m, c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedRow {
    pub model_id: String,
    /// Raw metric means in fixed metric order; a missing mean stacks as 0.
    pub segments: Vec<(Metric, f64)>,
}

impl StackedRow {
    pub fn total(&self) -> f64 {
        self.segments.iter().map(|(_, v)| v).sum()
    }

    pub fn largest(&self) -> Option<Metric> {
        self.segments
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(m, _)| *m)
    }
}

pub fn stacked_contributions(summaries: &[ModelSummary]) -> Vec<StackedRow> {
    summaries
        .iter()
        .map(|s| StackedRow {
            model_id: s.model_id.clone(),
            segments: Metric::ALL
                .iter()
                .map(|m| (*m, s.value(*m).unwrap_or(0.0)))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub value: Option<f64>,
    pub is_min: bool,
    pub is_max: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub models: Vec<String>,
    pub metrics: Vec<Metric>,
    /// `cells[model][metric]`.
    pub cells: Vec<Vec<HeatmapCell>>,
}

/// Model × metric grid with each metric's minimum and maximum flagged
/// (ties flag every tied model).
pub fn heatmap_data(summaries: &[ModelSummary]) -> Heatmap {
    let metrics = Metric::ALL.to_vec();
    let mut cells: Vec<Vec<HeatmapCell>> = summaries
        .iter()
        .map(|s| {
            metrics
                .iter()
                .map(|m| HeatmapCell {
                    value: s.value(*m),
                    is_min: false,
                    is_max: false,
                })
                .collect()
        })
        .collect();
    for j in 0..metrics.len() {
        let vals: Vec<f64> = cells.iter().filter_map(|r| r[j].value).collect();
        let Some(lo) = vals.iter().copied().reduce(f64::min) else {
            continue;
        };
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for row in &mut cells {
            if let Some(v) = row[j].value {
                row[j].is_min = v == lo;
                row[j].is_max = v == hi;
            }
        }
    }
    Heatmap {
        models: summaries.iter().map(|s| s.model_id.clone()).collect(),
        metrics,
        cells,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub metrics: Vec<Metric>,
    pub summaries: Vec<ModelSummary>,
    pub correlations: Option<CorrelationMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlations_by_model: Option<BTreeMap<String, CorrelationMatrix>>,
    pub stacked: Vec<StackedRow>,
    pub heatmap: Heatmap,
    /// Per-record scores; exported as `scores.csv` rather than into JSON.
    #[serde(skip)]
    pub scores: Vec<ScoreCard>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    /// Summary row order; models not listed follow by id.
    pub model_order: Vec<String>,
    /// Corpus-level MAUVE per model.
    pub mauve: BTreeMap<String, f64>,
    /// Replaces the sentence-mean BLEU of listed models (corpus-level BLEU).
    pub bleu_override: BTreeMap<String, f64>,
    pub per_model_correlations: bool,
}

pub fn build_report(
    run_id: &str,
    cards: &[ScoreCard],
    opts: &ReportOptions,
) -> Result<EvaluationReport, ReportError> {
    let mut summaries = aggregate(cards)?;
    order_summaries(&mut summaries, &opts.model_order);
    for s in &mut summaries {
        s.mauve = opts.mauve.get(&s.model_id).copied();
        if let Some(b) = opts.bleu_override.get(&s.model_id) {
            s.mean_bleu = *b;
        }
    }
    let correlations = match metric_correlations(cards) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("skipping correlations: {e}");
            None
        }
    };
    Ok(EvaluationReport {
        run_id: run_id.to_string(),
        metrics: Metric::ALL.to_vec(),
        stacked: stacked_contributions(&summaries),
        heatmap: heatmap_data(&summaries),
        correlations_by_model: opts
            .per_model_correlations
            .then(|| metric_correlations_by_model(cards)),
        correlations,
        summaries,
        scores: cards.to_vec(),
    })
}

pub fn scores_csv(cards: &[ScoreCard]) -> String {
    let mut s = String::from(ScoreCard::CSV_HEADER);
    s.push('\n');
    for c in cards {
        s.push_str(&c.to_csv_row());
        s.push('\n');
    }
    s
}

/// Parse `scores.csv`.
pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreCard>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == ScoreCard::CSV_HEADER => {}
        Some(h) => return Err(format!("unexpected header {h:?}")),
        None => return Err("empty file".into()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| ScoreCard::from_csv_row(l).map_err(|e| format!("line {}: {e}", i + 2)))
        .collect()
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn correlations_csv(c: Option<&CorrelationMatrix>) -> String {
    let mut s = String::from("metric");
    let names: Vec<String> = Metric::ALL.iter().map(|m| m.key().to_string()).collect();
    for n in &names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    if let Some(c) = c {
        for (name, row) in c.metric_names.iter().zip(&c.values) {
            s.push_str(name);
            for v in row {
                s.push(',');
                s.push_str(&f6(*v));
            }
            s.push('\n');
        }
    }
    s
}

fn stacked_csv(rows: &[StackedRow]) -> String {
    let mut s = String::from("model,metric,value,cumulative\n");
    for r in rows {
        let mut acc = 0.0;
        for (m, v) in &r.segments {
            acc += v;
            let _ = writeln!(s, "{},{},{},{}", csv_escape(&r.model_id), m.key(), f6(*v), f6(acc));
        }
    }
    s
}

fn heatmap_csv(h: &Heatmap) -> String {
    let mut s = String::from("model,metric,value,is_min,is_max\n");
    for (model, row) in h.models.iter().zip(&h.cells) {
        for (m, c) in h.metrics.iter().zip(row) {
            let v = c.value.map(f6).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", csv_escape(model), m.key(), v, c.is_min, c.is_max);
        }
    }
    s
}

/// Write the six report files into `out_dir`; returns their paths.
pub fn export_report(report: &EvaluationReport, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    let files: [(&str, String); 6] = [
        ("summary.csv", comparison_table(&report.summaries, None).to_csv()),
        ("scores.csv", scores_csv(&report.scores)),
        ("correlations.csv", correlations_csv(report.correlations.as_ref())),
        ("stacked.csv", stacked_csv(&report.stacked)),
        ("heatmap.csv", heatmap_csv(&report.heatmap)),
        ("report.json", json),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

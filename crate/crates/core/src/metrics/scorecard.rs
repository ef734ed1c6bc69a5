//! Per-record scoring.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::bertscore::{bert_score, IdfTable, Prf};
use super::meteor::Meteor;
use super::{bleu, rouge_l, tokenize, MetricConfig, MetricError, TokenScheme};
use crate::client::Embedder;
use crate::corpus::CodeExample;
use crate::pipeline::GenerationRecord;

/// Sentence-level metric values for one generation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub example_id: String,
    pub model_id: String,
    pub bleu: f64,
    pub rouge_l: Prf,
    pub meteor: f64,
    /// Absent when the embedding provider failed for this record.
    pub bertscore: Option<Prf>,
}

impl ScoreCard {
    pub fn zero(example_id: &str, model_id: &str) -> Self {
        Self {
            example_id: example_id.into(),
            model_id: model_id.into(),
            bleu: 0.0,
            rouge_l: Prf::default(),
            meteor: 0.0,
            bertscore: Some(Prf::default()),
        }
    }

    pub const CSV_HEADER: &'static str =
        "example_id,model_id,bleu,rouge_l_p,rouge_l_r,rouge_l_f,meteor,bert_p,bert_r,bert_f";

    pub fn to_csv_row(&self) -> String {
        let (bp, br, bf) = match &self.bertscore {
            Some(b) => (fmt(b.precision), fmt(b.recall), fmt(b.f)),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.example_id),
            csv_field(&self.model_id),
            fmt(self.bleu),
            fmt(self.rouge_l.precision),
            fmt(self.rouge_l.recall),
            fmt(self.rouge_l.f),
            fmt(self.meteor),
            bp,
            br,
            bf
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self, String> {
        let cols = split_csv_line(line);
        if cols.len() != 10 {
            return Err(format!("expected 10 columns, got {}", cols.len()));
        }
        let num = |i: usize| -> Result<f64, String> {
            cols[i]
                .parse::<f64>()
                .map_err(|e| format!("column {}: {e}", i + 1))
        };
        let bertscore = if cols[7].is_empty() && cols[8].is_empty() && cols[9].is_empty() {
            None
        } else {
            Some(Prf {
                precision: num(7)?,
                recall: num(8)?,
                f: num(9)?,
            })
        };
        Ok(Self {
            example_id: cols[0].clone(),
            model_id: cols[1].clone(),
            bleu: num(2)?,
            rouge_l: Prf {
                precision: num(3)?,
                recall: num(4)?,
                f: num(5)?,
            },
            meteor: num(6)?,
            bertscore,
        })
    }

    pub fn is_valid(&self) -> bool {
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        let ok_bert = self.bertscore.is_none_or(|b| {
            b.is_finite() && [b.precision, b.recall, b.f].iter().all(|v| (-1.0..=1.0).contains(v))
        });
        unit(self.bleu)
            && unit(self.rouge_l.precision)
            && unit(self.rouge_l.recall)
            && unit(self.rouge_l.f)
            && unit(self.meteor)
            && ok_bert
    }
}

/// Shortest decimal that parses back to the same value.
fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

/// Scores records against their examples with one metric configuration.
pub struct Scorer {
    cfg: MetricConfig,
    meteor: Meteor,
    embedder: Arc<dyn Embedder>,
    idf: Option<IdfTable>,
}

impl Scorer {
    pub fn new(cfg: MetricConfig, embedder: Arc<dyn Embedder>) -> Result<Self, MetricError> {
        cfg.validate()?;
        Ok(Self {
            meteor: Meteor::from_config(&cfg)?,
            cfg,
            embedder,
            idf: None,
        })
    }

    /// IDF weights for BERTScore, used when `bertscore_idf` is on.
    pub fn with_idf(mut self, idf: IdfTable) -> Self {
        self.idf = Some(idf);
        self
    }

    pub fn config(&self) -> &MetricConfig {
        &self.cfg
    }

    pub fn score(&self, rec: &GenerationRecord, ex: &CodeExample) -> Result<ScoreCard, MetricError> {
        if rec.example_id != ex.id {
            return Err(MetricError::IdMismatch {
                record: rec.example_id.clone(),
                example: ex.id.clone(),
            });
        }
        let cand = tokenize(&rec.final_output, TokenScheme::Default);
        let refr = tokenize(&ex.reference, TokenScheme::Default);
        if cand.is_empty() {
            log::warn!("{} × {}: empty output scored as 0", rec.example_id, rec.model_id);
            return Ok(ScoreCard::zero(&rec.example_id, &rec.model_id));
        }
        let bleu = bleu(&cand, std::slice::from_ref(&refr), &self.cfg).unwrap_or(0.0);
        let bertscore = match bert_score(
            &rec.final_output,
            &ex.reference,
            self.embedder.as_ref(),
            &self.cfg,
            self.idf.as_ref(),
        ) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("{} × {}: BERTScore unavailable: {e}", rec.example_id, rec.model_id);
                None
            }
        };
        Ok(ScoreCard {
            example_id: rec.example_id.clone(),
            model_id: rec.model_id.clone(),
            bleu,
            rouge_l: rouge_l(&cand, &refr, self.cfg.rouge_beta),
            meteor: self.meteor.score(&cand, &refr),
            bertscore,
        })
    }
}

/// Score one record with a fresh [`Scorer`].
pub fn score_record(
    rec: &GenerationRecord,
    ex: &CodeExample,
    embedder: Arc<dyn Embedder>,
    cfg: &MetricConfig,
) -> Result<ScoreCard, MetricError> {
    Scorer::new(cfg.clone(), embedder)?.score(rec, ex)
}

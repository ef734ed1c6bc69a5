//! BERTScore by greedy max-cosine token matching.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{ratio, tokenize, MetricConfig, MetricError, TokenScheme, TokenSeq};
use crate::client::{ClientError, Embedder};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f: ratio(2.0 * precision * recall, precision + recall),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.precision.is_finite() && self.recall.is_finite() && self.f.is_finite()
    }
}

/// Inverse document frequencies over a reference collection,
/// `idf(w) = ln((M + 1) / (df(w) + 1))`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdfTable {
    docs: usize,
    df: HashMap<String, usize>,
}

impl IdfTable {
    pub fn from_references<'a, I>(refs: I) -> Self
    where
        I: IntoIterator<Item = &'a TokenSeq>,
    {
        let mut t = IdfTable::default();
        for r in refs {
            t.docs += 1;
            let uniq: HashSet<&String> = r.tokens.iter().collect();
            for w in uniq {
                *t.df.entry(w.clone()).or_default() += 1;
            }
        }
        t
    }

    pub fn weight(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((self.docs + 1) as f64 / (df + 1) as f64).ln()
    }
}

fn normalised(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|mut r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter_mut().for_each(|x| *x /= n);
            }
            r
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted mean over `from` tokens of their best cosine against `to`.
fn greedy_side(from: &[Vec<f64>], to: &[Vec<f64>], weights: &[f64]) -> f64 {
    let best: Vec<f64> = from
        .iter()
        .map(|a| to.iter().map(|b| dot(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let wsum: f64 = weights.iter().sum();
    if wsum > 0.0 {
        best.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / wsum
    } else {
        best.iter().sum::<f64>() / best.len() as f64
    }
}

fn token_vectors(
    embedder: &dyn Embedder,
    seq: &TokenSeq,
) -> Result<Vec<Vec<f64>>, MetricError> {
    let m = embedder.embed_tokens(&seq.tokens)?;
    if m.len() != seq.len() {
        return Err(ClientError::MalformedResponse(format!(
            "expected {} token vectors, got {}",
            seq.len(),
            m.len()
        ))
        .into());
    }
    Ok(normalised(m.into_rows()))
}

/// BERTScore of `candidate` against `reference`, both raw text.
///
/// With `cfg.bertscore_idf` each token is weighted by `idf` (uniform weights
/// when no table is given). With `cfg.bertscore_rescale` every component is
/// mapped through `(s - b) / (1 - b)`.
pub fn bert_score(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
    cfg: &MetricConfig,
    idf: Option<&IdfTable>,
) -> Result<Prf, MetricError> {
    let cand = tokenize(candidate, TokenScheme::Default);
    let refr = tokenize(reference, TokenScheme::Default);
    if cand.is_empty() || refr.is_empty() {
        return Err(MetricError::EmptyText);
    }
    let cv = token_vectors(embedder, &cand)?;
    let rv = token_vectors(embedder, &refr)?;
    let (dc, dr) = (cv[0].len(), rv[0].len());
    if dc != dr {
        return Err(MetricError::DimensionMismatch(dc, dr));
    }
    let weights = |s: &TokenSeq| -> Vec<f64> {
        match (cfg.bertscore_idf, idf) {
            (true, Some(t)) => s.tokens.iter().map(|w| t.weight(w)).collect(),
            _ => vec![1.0; s.len()],
        }
    };
    let precision = greedy_side(&cv, &rv, &weights(&cand));
    let recall = greedy_side(&rv, &cv, &weights(&refr));
    let prf = Prf::from_pr(precision, recall);
    if !cfg.bertscore_rescale {
        return Ok(prf);
    }
    let b = cfg
        .bertscore_baseline
        .ok_or_else(|| MetricError::Config("bertscore_rescale needs bertscore_baseline".into()))?;
    let r = |s: f64| (s - b) / (1.0 - b);
    Ok(Prf {
        precision: r(prf.precision),
        recall: r(prf.recall),
        f: r(prf.f),
    })
}

//! BLEU: clipped modified n-gram precisions combined by a weighted geometric
//! mean and scaled by the brevity penalty.
//!
//! Sentence scores use the effective order: n-gram orders the candidate is
//! too short to contain are dropped and the remaining weights renormalised,
//! so a short candidate identical to its reference still scores 1.

use serde::{Deserialize, Serialize};

use super::{MetricConfig, MetricError, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuSmoothing {
    /// Any zero precision makes the score 0.
    None,
    /// Zero match counts become `epsilon` before dividing.
    #[default]
    Epsilon,
    /// `(m + 1) / (t + 1)` for orders 2 and up.
    AddOne,
}

/// Sufficient statistics for BLEU over one or more segments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    /// Clipped matches per order, index 0 = unigrams.
    pub matches: Vec<usize>,
    /// Candidate n-grams per order.
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        if self.matches.len() < other.matches.len() {
            self.matches.resize(other.matches.len(), 0);
            self.totals.resize(other.totals.len(), 0);
        }
        for (i, (m, t)) in other.matches.iter().zip(&other.totals).enumerate() {
            self.matches[i] += m;
            self.totals[i] += t;
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }
}

/// Replace `key` by dense ranks, writing each position's rank into `out`.
/// Returns the number of distinct keys.
fn densify<K: Ord + Copy>(keyed: &mut [(K, u32)], out: &mut [u32]) -> usize {
    keyed.sort_unstable_by_key(|k| k.0);
    let mut rank = 0;
    for i in 0..keyed.len() {
        if i > 0 && keyed[i].0 != keyed[i - 1].0 {
            rank += 1;
        }
        out[keyed[i].1 as usize] = rank as u32;
    }
    if keyed.is_empty() {
        0
    } else {
        rank + 1
    }
}

/// Reference length closest to `c`, ties going to the shorter one.
fn closest_ref_len(c: usize, refs: &[TokenSeq]) -> usize {
    refs.iter()
        .map(TokenSeq::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

pub fn bleu_stats(candidate: &TokenSeq, references: &[TokenSeq], max_n: usize) -> BleuStats {
    // All sequences laid out back to back, candidate first.
    let seq = |k: usize| if k == 0 { candidate } else { &references[k - 1] };
    let count = references.len() + 1;
    let total: usize = (0..count).map(|k| seq(k).len()).sum();
    let mut arena = vec![0u32; count + 1 + 5 * total];
    let (bounds, rest) = arena.split_at_mut(count + 1);
    let (tokens, rest) = rest.split_at_mut(total);
    let (ids, rest) = rest.split_at_mut(total);
    let (cand_count, rest) = rest.split_at_mut(total);
    let (max_ref, ref_count) = rest.split_at_mut(total);
    for k in 0..count {
        bounds[k + 1] = bounds[k] + seq(k).len() as u32;
    }
    let mut strs: Vec<(&str, u32)> = (0..count)
        .flat_map(|k| seq(k).tokens.iter().map(String::as_str))
        .zip(0u32..)
        .collect();
    let mut distinct = densify(&mut strs, tokens);

    let mut stats = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        candidate_len: candidate.len(),
        reference_len: closest_ref_len(candidate.len(), references),
    };
    // `ids[p]` is the id of the n-gram starting at flat position p, valid
    // while p + n stays inside its sequence.
    ids.copy_from_slice(tokens);
    let mut keyed: Vec<(u64, u32)> = Vec::with_capacity(total);
    for n in 1..=max_n.min(candidate.len()) {
        let grams = |k: usize| {
            let (lo, hi) = (bounds[k] as usize, bounds[k + 1] as usize);
            lo..hi.saturating_sub(n - 1).max(lo)
        };
        if n > 1 {
            keyed.clear();
            for k in 0..count {
                for p in grams(k) {
                    keyed.push(((ids[p] as u64) << 32 | tokens[p + n - 1] as u64, p as u32));
                }
            }
            distinct = densify(&mut keyed, ids);
        }
        for v in [&mut *cand_count, &mut *max_ref, &mut *ref_count] {
            v[..distinct].fill(0);
        }
        for k in 1..count {
            for p in grams(k) {
                ref_count[ids[p] as usize] += 1;
            }
            for p in grams(k) {
                let g = ids[p] as usize;
                max_ref[g] = max_ref[g].max(ref_count[g]);
                ref_count[g] = 0;
            }
        }
        let mut matched = 0;
        for p in grams(0) {
            let g = ids[p] as usize;
            cand_count[g] += 1;
            if cand_count[g] <= max_ref[g] {
                matched += 1;
            }
        }
        stats.matches[n - 1] = matched;
        stats.totals[n - 1] = grams(0).len();
    }
    stats
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// Combine statistics into a score in `[0, 1]`.
pub fn bleu_from_stats(
    stats: &BleuStats,
    weights: &[f64],
    smoothing: BleuSmoothing,
    epsilon: f64,
) -> f64 {
    if stats.candidate_len == 0 {
        return 0.0;
    }
    let orders: Vec<usize> = (0..weights.len().min(stats.totals.len()))
        .filter(|&i| stats.totals[i] > 0)
        .collect();
    if orders.is_empty() {
        return 0.0;
    }
    let mut wsum: f64 = orders.iter().map(|&i| weights[i]).sum();
    let uniform = wsum == 0.0;
    if uniform {
        wsum = orders.len() as f64;
    }
    let mut log_sum = 0.0;
    for &i in &orders {
        let m = stats.matches[i] as f64;
        let t = stats.totals[i] as f64;
        let p = match smoothing {
            BleuSmoothing::None => m / t,
            BleuSmoothing::Epsilon if stats.matches[i] == 0 => epsilon / t,
            BleuSmoothing::Epsilon => m / t,
            BleuSmoothing::AddOne if i > 0 => (m + 1.0) / (t + 1.0),
            BleuSmoothing::AddOne => m / t,
        };
        if p == 0.0 {
            return 0.0;
        }
        let w = if uniform { 1.0 } else { weights[i] };
        log_sum += w / wsum * p.ln();
    }
    let score = brevity_penalty(stats.candidate_len, stats.reference_len) * log_sum.exp();
    score.clamp(0.0, 1.0)
}

/// Sentence-level BLEU of `candidate` against one or more references.
pub fn bleu(
    candidate: &TokenSeq,
    references: &[TokenSeq],
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences);
    }
    if candidate.is_empty() {
        return Err(MetricError::EmptyCandidate);
    }
    let stats = bleu_stats(candidate, references, cfg.bleu_max_n);
    Ok(bleu_from_stats(
        &stats,
        &cfg.weights(),
        cfg.bleu_smoothing,
        cfg.bleu_epsilon,
    ))
}

/// Corpus-level BLEU over `(candidate, references)` segments.
pub fn corpus_bleu<'a, I>(segments: I, cfg: &MetricConfig) -> f64
where
    I: IntoIterator<Item = (&'a TokenSeq, &'a [TokenSeq])>,
{
    let mut total = BleuStats {
        matches: vec![0; cfg.bleu_max_n],
        totals: vec![0; cfg.bleu_max_n],
        ..Default::default()
    };
    for (cand, refs) in segments {
        total.add(&bleu_stats(cand, refs, cfg.bleu_max_n));
    }
    bleu_from_stats(&total, &cfg.weights(), cfg.bleu_smoothing, cfg.bleu_epsilon)
}

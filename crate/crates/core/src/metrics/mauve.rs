//! MAUVE: area under the divergence frontier of two quantised text
//! distributions.

use serde::{Deserialize, Serialize};

use super::kmeans::{cmp_rows, kmeans};
use super::{MetricConfig, MetricError};
use crate::client::Embedder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MauveResult {
    pub score: f64,
    pub cluster_count: usize,
    /// `(KL(P | R_λ), KL(Q | R_λ))` for each λ on the grid, λ ascending.
    pub frontier: Vec<(f64, f64)>,
}

/// `Σ p ln(p / q)` over the support of `p`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// `n` evenly spaced mixture weights strictly inside `(0, 1)`.
pub fn lambda_grid(n: usize) -> Vec<f64> {
    let (lo, hi) = (1e-6, 1.0 - 1e-6);
    if n == 1 {
        return vec![0.5];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

pub fn frontier(p: &[f64], q: &[f64], grid: &[f64]) -> Vec<(f64, f64)> {
    grid.iter()
        .map(|&l| {
            let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| l * a + (1.0 - l) * b).collect();
            (kl(p, &r), kl(q, &r))
        })
        .collect()
}

fn area(points: &[(f64, f64)], c: f64) -> f64 {
    let mut curve: Vec<(f64, f64)> = points
        .iter()
        .map(|&(kp, kq)| ((-c * kq).exp(), (-c * kp).exp()))
        .collect();
    curve.push((0.0, 1.0));
    curve.push((1.0, 0.0));
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let a: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    a.clamp(0.0, 1.0)
}

/// MAUVE between two histograms over the same bins.
pub fn mauve_from_histograms(p: &[f64], q: &[f64], cfg: &MetricConfig) -> MauveResult {
    let grid = lambda_grid(cfg.mauve_frontier_points);
    let points = frontier(p, q, &grid);
    // The score is symmetric in (P, Q); evaluating in a fixed orientation
    // makes swapped arguments agree to the bit.
    let swap = cmp_rows(p, q).is_gt();
    let score = if swap {
        let rev = frontier(q, p, &grid);
        area(&rev, cfg.mauve_scaling_c)
    } else {
        area(&points, cfg.mauve_scaling_c)
    };
    MauveResult {
        score,
        cluster_count: p.len(),
        frontier: points,
    }
}

/// MAUVE over pre-computed embeddings.
pub fn mauve_from_embeddings(
    human: &[Vec<f64>],
    model: &[Vec<f64>],
    cfg: &MetricConfig,
) -> Result<MauveResult, MetricError> {
    if human.len() < 2 || model.len() < 2 {
        return Err(MetricError::InsufficientSamples {
            human: human.len(),
            model: model.len(),
        });
    }
    let dim = human[0].len();
    if let Some(bad) = human.iter().chain(model).find(|r| r.len() != dim) {
        return Err(MetricError::DimensionMismatch(dim, bad.len()));
    }
    // Cluster a canonically ordered copy so the result does not depend on
    // which side is passed first.
    let mut rows: Vec<(&Vec<f64>, bool)> = human
        .iter()
        .map(|r| (r, true))
        .chain(model.iter().map(|r| (r, false)))
        .collect();
    rows.sort_by(|a, b| cmp_rows(a.0, b.0));
    let points: Vec<Vec<f64>> = rows.iter().map(|(r, _)| (*r).clone()).collect();
    let k = cfg.mauve_clusters.resolve(points.len());
    let km = kmeans(&points, k, cfg.mauve_seed, cfg.mauve_max_iter, cfg.mauve_tolerance);
    let bins = km.centroids.len();
    let mut p = vec![0.0; bins];
    let mut q = vec![0.0; bins];
    for ((_, is_human), &l) in rows.iter().zip(&km.labels) {
        if *is_human {
            p[l] += 1.0;
        } else {
            q[l] += 1.0;
        }
    }
    p.iter_mut().for_each(|v| *v /= human.len() as f64);
    q.iter_mut().for_each(|v| *v /= model.len() as f64);
    Ok(mauve_from_histograms(&p, &q, cfg))
}

/// MAUVE between human-written and model-generated texts.
pub fn mauve(
    human_texts: &[String],
    model_texts: &[String],
    embedder: &dyn Embedder,
    cfg: &MetricConfig,
) -> Result<MauveResult, MetricError> {
    if human_texts.len() < 2 || model_texts.len() < 2 {
        return Err(MetricError::InsufficientSamples {
            human: human_texts.len(),
            model: model_texts.len(),
        });
    }
    let h = embedder.embed(human_texts)?.into_rows();
    let m = embedder.embed(model_texts)?.into_rows();
    mauve_from_embeddings(&h, &m, cfg)
}

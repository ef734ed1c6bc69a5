use super::{ratio, Prf, TokenSeq};

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F-measure weighting recall `beta` times as much as precision.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    ratio((1.0 + b2) * precision * recall, recall + b2 * precision)
}

/// ROUGE-L precision, recall and F-beta from the LCS.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq, beta: f64) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let lcs = lcs_len(candidate.as_slice(), reference.as_slice()) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Prf {
        precision: p,
        recall: r,
        f: f_beta(p, r, beta),
    }
}

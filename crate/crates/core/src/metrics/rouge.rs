use super::{check_corpus, EvalPair};
use crate::error::Result;

pub const ROUGE_BETA: f64 = 1.2;

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_measure(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// ROUGE-L F-measure with β = 1.2, best reference per pair, averaged over
/// the corpus.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let total: f64 = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| f_measure(&p.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / pairs.len() as f64)
}

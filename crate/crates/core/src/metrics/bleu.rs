use super::{check_corpus, ngrams, EvalPair};
use crate::error::{Error, Result};

/// Corpus-level BLEU with uniform weights over 1..=`n_max` grams and no
/// smoothing: any zero precision gives 0. The brevity penalty uses, per
/// pair, the reference length closest to the candidate (ties go to the
/// shorter reference).
pub fn bleu(pairs: &[EvalPair], n_max: usize) -> Result<f64> {
    if !(1..=4).contains(&n_max) {
        return Err(Error::Metric(format!("BLEU order must be 1..=4, got {n_max}")));
    }
    check_corpus(pairs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for pair in pairs {
        let c = pair.candidate.len();
        cand_len += c;
        ref_len += pair
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("nonempty references");
        for n in 1..=n_max {
            let cand = ngrams(&pair.candidate, n);
            let refs: Vec<_> = pair.references.iter().map(|r| ngrams(r, n)).collect();
            for (gram, &count) in &cand {
                let max_ref = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += count.min(max_ref);
            }
            total[n - 1] += c.saturating_sub(n - 1);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..n_max {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n_max as f64).exp())
}

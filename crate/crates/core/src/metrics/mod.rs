//! Caption metrics and the corpus cross-entropy comparison.
//!
//! Every metric takes [`EvalPair`]s tokenized with the same tokenizer the
//! model uses, so scores are a pure function of the token lists.

mod bleu;
mod cider;
mod compare;
mod rouge;

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::data::vocab::tokenize;
use crate::error::{Error, Result};

pub use bleu::bleu;
pub use cider::{cider, Cider};
pub use compare::{compare_loss, corpus_mean_ce, shuffled_words, LossComparison};
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};

/// One candidate caption and its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if candidate.is_empty() {
            return Err(Error::Metric("empty candidate".into()));
        }
        if references.is_empty() || references.iter().any(Vec::is_empty) {
            return Err(Error::Metric("every pair needs at least one nonempty reference".into()));
        }
        Ok(EvalPair { candidate, references })
    }

    /// Tokenizes raw strings.
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        Self::new(tokenize(candidate), references.iter().map(|r| tokenize(r.as_ref())).collect())
    }
}

pub(crate) fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::Metric("empty corpus".into()))
    } else {
        Ok(())
    }
}

/// Metric names accepted by [`score`].
pub const METRIC_NAMES: [&str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"];

/// Expands `bleu`, `rouge` and `cider` shorthands and rejects unknown names.
pub fn parse_metric_list(list: &str) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let expanded: &[&'static str] = match name {
            "bleu" => &METRIC_NAMES[..4],
            "rouge" | "rouge_l" | "rouge-l" => &METRIC_NAMES[4..5],
            "cider" => &METRIC_NAMES[5..],
            other => match METRIC_NAMES.iter().find(|m| **m == other) {
                Some(m) => std::slice::from_ref(m),
                None => {
                    return Err(Error::Metric(format!(
                        "unknown metric {other:?}; valid names: bleu, rouge, {}",
                        METRIC_NAMES.join(", ")
                    )))
                }
            },
        };
        for m in expanded {
            if !out.contains(m) {
                out.push(*m);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Metric("no metrics requested".into()));
    }
    Ok(out)
}

/// Scores `pairs` with one metric from [`METRIC_NAMES`].
pub fn score(name: &str, pairs: &[EvalPair]) -> Result<f64> {
    match name {
        "bleu1" => bleu(pairs, 1),
        "bleu2" => bleu(pairs, 2),
        "bleu3" => bleu(pairs, 3),
        "bleu4" => bleu(pairs, 4),
        "rouge_l" => rouge_l(pairs),
        "cider" => cider(pairs),
        other => Err(Error::Metric(format!("unknown metric {other:?}"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Prediction {
    image_id: String,
    caption: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct References {
    image_id: String,
    captions: Vec<String>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Joins a predictions file (`{image_id, caption}` per line) with a
/// references file (`{image_id, captions: [..]}` per line). Pairs follow the
/// order of the predictions file.
pub fn load_eval_pairs(predictions: &Path, references: &Path) -> Result<Vec<EvalPair>> {
    let mut refs: HashMap<String, Vec<String>> = HashMap::new();
    for (line, r) in read_lines::<References>(references)? {
        if refs.insert(r.image_id.clone(), r.captions).is_some() {
            return Err(Error::Dataset {
                path: references.to_path_buf(),
                line,
                msg: format!("duplicate image_id {:?}", r.image_id),
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for (line, p) in read_lines::<Prediction>(predictions)? {
        let fail = |msg: String| Error::Dataset {
            path: predictions.to_path_buf(),
            line,
            msg,
        };
        if !seen.insert(p.image_id.clone()) {
            return Err(fail(format!("duplicate image_id {:?}", p.image_id)));
        }
        let r = refs
            .get(&p.image_id)
            .ok_or_else(|| fail(format!("no references for image_id {:?}", p.image_id)))?;
        pairs.push(EvalPair::from_text(&p.caption, r).map_err(|e| fail(e.to_string()))?);
    }
    check_corpus(&pairs)?;
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_list_parsing() {
        assert_eq!(parse_metric_list("bleu,rouge").unwrap(), ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"]);
        assert_eq!(parse_metric_list("cider, bleu2,cider").unwrap(), ["cider", "bleu2"]);
        let err = parse_metric_list("bleu,meteor").unwrap_err().to_string();
        assert!(err.contains("meteor") && err.contains("cider"), "{err}");
        assert!(parse_metric_list("").is_err());
    }

    #[test]
    fn pairs_reject_empty_text() {
        assert!(EvalPair::from_text("", &["a b"]).is_err());
        assert!(EvalPair::from_text("a", &[""]).is_err());
        assert!(EvalPair::from_text::<&str>("a", &[]).is_err());
    }

    #[test]
    fn eval_files_join_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let pred = dir.path().join("pred.jsonl");
        let refs = dir.path().join("refs.jsonl");
        std::fs::write(&pred, "{\"image_id\":\"b\",\"caption\":\"a dog\"}\n{\"image_id\":\"a\",\"caption\":\"a cat\"}\n").unwrap();
        std::fs::write(&refs, "{\"image_id\":\"a\",\"captions\":[\"a cat\",\"the cat\"]}\n{\"image_id\":\"b\",\"captions\":[\"a dog\"]}\n").unwrap();
        let pairs = load_eval_pairs(&pred, &refs).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].candidate, ["a", "dog"]);
        assert_eq!(pairs[1].references.len(), 2);
        std::fs::write(&pred, "{\"image_id\":\"c\",\"caption\":\"x\"}\n").unwrap();
        let err = load_eval_pairs(&pred, &refs).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}

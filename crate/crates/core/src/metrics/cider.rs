use std::collections::HashMap;

use super::{check_corpus, ngrams, EvalPair};
use crate::error::{Error, Result};

const MAX_N: usize = 4;

type Vector<'a> = HashMap<&'a [String], f64>;

/// Document frequencies of a reference corpus, ready to score candidates.
///
/// An n-gram's document frequency is the number of images whose reference
/// set contains it; `idf = ln(N / df)` with `df` floored at 1 so n-grams
/// unseen in the references get the largest weight.
#[derive(Clone, Debug)]
pub struct Cider {
    images: usize,
    df: HashMap<Vec<String>, usize>,
    df_scale: f64,
}

impl Cider {
    /// One entry of `references` per image.
    pub fn new(references: &[Vec<Vec<String>>]) -> Result<Self> {
        if references.len() < 2 {
            return Err(Error::Metric(format!(
                "CIDEr needs document frequencies over at least 2 images, got {}",
                references.len()
            )));
        }
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in references {
            let mut seen: HashMap<&[String], ()> = HashMap::new();
            for r in refs {
                for n in 1..=MAX_N {
                    for gram in ngrams(r, n).into_keys() {
                        seen.insert(gram, ());
                    }
                }
            }
            for gram in seen.into_keys() {
                *df.entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
        Ok(Cider {
            images: references.len(),
            df,
            df_scale: 1.0,
        })
    }

    /// Multiplies every document frequency by `scale` before taking the IDF.
    pub fn with_df_scale(mut self, scale: f64) -> Self {
        self.df_scale = scale;
        self
    }

    fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1) as f64;
        (self.images as f64 / (self.df_scale * df)).ln()
    }

    fn vector<'a>(&self, tokens: &'a [String], n: usize) -> Vector<'a> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(gram, count)| (gram, count as f64 * self.idf(gram)))
            .collect()
    }

    /// Score of one candidate against its references, before corpus averaging.
    pub fn score_pair(&self, pair: &EvalPair) -> f64 {
        let mut sum = 0.0;
        for n in 1..=MAX_N {
            let cand = self.vector(&pair.candidate, n);
            let cand_norm = norm(&cand);
            let mut per_ref = 0.0;
            for r in &pair.references {
                let refv = self.vector(r, n);
                let denom = cand_norm * norm(&refv);
                if denom > 0.0 {
                    let dot: f64 = cand.iter().filter_map(|(g, w)| refv.get(g).map(|v| w * v)).sum();
                    per_ref += dot / denom;
                }
            }
            sum += per_ref / pair.references.len() as f64;
        }
        10.0 * sum / MAX_N as f64
    }

    pub fn score(&self, pairs: &[EvalPair]) -> Result<f64> {
        check_corpus(pairs)?;
        Ok(pairs.iter().map(|p| self.score_pair(p)).sum::<f64>() / pairs.len() as f64)
    }
}

fn norm(v: &Vector) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

/// CIDEr with document frequencies taken from the references of `pairs`,
/// one pair per image.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|p| p.references.clone()).collect();
    Cider::new(&refs)?.score(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::tokenize;

    fn pair(c: &str, r: &[&str]) -> EvalPair {
        EvalPair::from_text(c, r).unwrap()
    }

    #[test]
    fn unique_identical_caption_scores_ten() {
        let p = [
            pair("small red circle top left", &["small red circle top left"]),
            pair("large blue square bottom right", &["large blue square bottom right"]),
        ];
        assert!((cider(&p).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn nothing_shared_scores_zero() {
        let p = [pair("green", &["red circle"]), pair("yellow", &["blue square"])];
        assert_eq!(cider(&p).unwrap(), 0.0);
    }

    #[test]
    fn single_image_is_an_error() {
        let err = cider(&[pair("a", &["a"])]).unwrap_err().to_string();
        assert!(err.contains("2 images"), "{err}");
    }

    #[test]
    fn ubiquitous_ngrams_carry_no_weight() {
        // "a" appears in every image and gets idf 0
        let p = [pair("a cat sat down", &["a cat sat down"]), pair("a dog ran off", &["a dog ran off"])];
        let c = Cider::new(&[p[0].references.clone(), p[1].references.clone()]).unwrap();
        assert_eq!(c.idf(&tokenize("a")), 0.0);
        assert!((c.score_pair(&p[0]) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn orders_longer_than_the_caption_score_zero() {
        let p = [pair("red circle", &["red circle"]), pair("blue square", &["blue square"])];
        assert!((cider(&p).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn order_invariant() {
        let a = pair("a red circle", &["a red circle left", "red circle"]);
        let b = pair("a blue square", &["blue square top"]);
        let c = pair("green triangle", &["a green triangle"]);
        let x = cider(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = cider(&[c, a, b]).unwrap();
        assert!((x - y).abs() < 1e-12);
    }
}

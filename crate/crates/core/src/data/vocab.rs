//! Word-level tokenizer and vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const NOISE: u32 = 3;
pub const INST: u32 = 4;
pub const ANS: u32 = 5;
pub const UNK: u32 = 6;

/// Reserved token strings; index equals id.
pub const RESERVED: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<noise>", "<inst>", "<ans>", "<unk>"];

/// Lowercases and splits into alphanumeric runs and single punctuation
/// characters. Whitespace only separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Inverse of [`tokenize`] up to normalization: words are joined with single
/// spaces and punctuation attaches to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let punct = tok.chars().all(|c| !c.is_alphanumeric());
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// `tokenize` followed by `detokenize`.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

impl Vocab {
    /// Reserved tokens followed by every word of `texts`, most frequent
    /// first with ties in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, capacity: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(&w.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let size = RESERVED.len() + ranked.len();
        if size > capacity {
            return Err(Error::VocabOverflow { size, capacity });
        }
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(ranked.into_iter().map(|(w, _)| w));
        Ok(Self::from(words))
    }

    /// This vocabulary with every new word of `texts` appended, ranked as
    /// in [`Vocab::build`]. Existing ids are unchanged.
    pub fn extended<'a>(&self, texts: impl IntoIterator<Item = &'a str>, capacity: usize) -> Result<Self> {
        let fresh = Self::build(texts, usize::MAX)?;
        let mut words = self.words.clone();
        words.extend(fresh.words.into_iter().filter(|w| self.id(w).is_none()));
        if words.len() > capacity {
            return Err(Error::VocabOverflow {
                size: words.len(),
                capacity,
            });
        }
        Ok(Self::from(words))
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(w, r)| w != r) {
            return Err(Error::Input("vocabulary must start with the reserved tokens".into()));
        }
        let v = Self::from(words);
        if v.index.len() != v.words.len() {
            return Err(Error::Input("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Token ids for `text`; unknown words map to `<unk>`. The second value
    /// lists the unknown words.
    pub fn encode_lossy(&self, text: &str) -> (Vec<u32>, Vec<String>) {
        let mut unknown = Vec::new();
        let ids = tokenize(text)
            .into_iter()
            .map(|w| {
                self.id(&w).unwrap_or_else(|| {
                    unknown.push(w);
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_lossy(text).0
    }

    /// Text for `ids`, skipping `<pad>`, `<bos>` and `<eos>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect();
        detokenize(&words)
    }
}

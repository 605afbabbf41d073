//! Samples and their token/label encoding.
//!
//! Every encoding follows the same shape: a token sequence `s` that starts
//! with `<bos>` and ends with `<eos>`, a supervision flag per token, and
//! next-token labels. The model input is `s` without its final `<eos>`;
//! position `i` is labelled with `s[i + 1]` when that token is supervised
//! and with [`IGNORE_INDEX`] otherwise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::data::vocab::{Vocab, ANS, BOS, EOS, INST};
use crate::error::{Error, Result};
use crate::graph::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub instruction: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Content {
    Caption(String),
    Conversation(Vec<Turn>),
}

impl Content {
    /// Every string the vocabulary must cover.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            Content::Caption(c) => vec![c.as_str()],
            Content::Conversation(turns) => turns
                .iter()
                .flat_map(|t| [t.instruction.as_str(), t.answer.as_str()])
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Arc<Image>,
    pub content: Content,
}

/// Model input ids and aligned next-token labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub labels: Vec<i64>,
}

impl Encoded {
    fn from_sequence(seq: &[(u32, bool)]) -> Self {
        let ids = seq[..seq.len() - 1].iter().map(|&(t, _)| t).collect();
        let labels = seq[1..]
            .iter()
            .map(|&(t, sup)| if sup { i64::from(t) } else { IGNORE_INDEX })
            .collect();
        Encoded { ids, labels }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

fn words(vocab: &Vocab, text: &str, what: &str) -> Result<Vec<u32>> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        return Err(Error::Input(format!("empty {what}")));
    }
    Ok(ids)
}

/// `<bos> caption <eos>` with every caption token and `<eos>` supervised.
pub fn encode_caption(vocab: &Vocab, caption: &str) -> Result<Encoded> {
    let mut seq = vec![(BOS, false)];
    seq.extend(words(vocab, caption, "caption")?.into_iter().map(|t| (t, true)));
    seq.push((EOS, true));
    Ok(Encoded::from_sequence(&seq))
}

/// `<bos> (<inst> instruction <ans> answer)+ <eos>`; only answer tokens and
/// the closing `<eos>` are supervised.
pub fn format_conversation(vocab: &Vocab, turns: &[Turn]) -> Result<Encoded> {
    if turns.is_empty() {
        return Err(Error::Input("conversation has no turns".into()));
    }
    let mut seq = vec![(BOS, false)];
    for turn in turns {
        seq.push((INST, false));
        seq.extend(words(vocab, &turn.instruction, "instruction")?.into_iter().map(|t| (t, false)));
        seq.push((ANS, false));
        seq.extend(words(vocab, &turn.answer, "answer")?.into_iter().map(|t| (t, true)));
    }
    seq.push((EOS, true));
    Ok(Encoded::from_sequence(&seq))
}

pub fn encode_content(vocab: &Vocab, content: &Content) -> Result<Encoded> {
    match content {
        Content::Caption(c) => encode_caption(vocab, c),
        Content::Conversation(turns) => format_conversation(vocab, turns),
    }
}

/// Generation prompt: `<bos>` alone for captioning, otherwise
/// `<bos> <inst> instruction <ans>`.
pub fn prompt_ids(vocab: &Vocab, instruction: Option<&str>) -> Vec<u32> {
    match instruction {
        None => vec![BOS],
        Some(text) => {
            let mut ids = vec![BOS, INST];
            ids.extend(vocab.encode(text));
            ids.push(ANS);
            ids
        }
    }
}

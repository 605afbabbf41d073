use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::sample::{Content, Sample};
use crate::error::{Error, Result};
use crate::model::params::VLMParams;
use crate::training::trainer::{corpus_loss, StageData};

const BATCH: usize = 8;

/// Mean per-token cross-entropy over every supervised position of `data`.
pub fn corpus_mean_ce(params: &VLMParams, data: &StageData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    corpus_loss(params, data, BATCH)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComparison {
    pub loss_a: f64,
    pub loss_b: f64,
}

impl LossComparison {
    /// `loss_b − loss_a`; positive when the model finds corpus A easier.
    pub fn difference(&self) -> f64 {
        self.loss_b - self.loss_a
    }
}

pub fn compare_loss(params: &VLMParams, a: &StageData, b: &StageData) -> Result<LossComparison> {
    Ok(LossComparison {
        loss_a: corpus_mean_ce(params, a)?,
        loss_b: corpus_mean_ce(params, b)?,
    })
}

fn shuffle_text(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    words.shuffle(rng);
    words.join(" ")
}

/// Copies of `samples` with the words of every caption and answer shuffled.
/// The word multiset, and so the vocabulary, is unchanged.
pub fn shuffled_words(samples: &[Sample], seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let content = match &s.content {
                Content::Caption(c) => Content::Caption(shuffle_text(c, &mut rng)),
                Content::Conversation(turns) => Content::Conversation(
                    turns
                        .iter()
                        .map(|t| crate::data::sample::Turn {
                            instruction: t.instruction.clone(),
                            answer: shuffle_text(&t.answer, &mut rng),
                        })
                        .collect(),
                ),
            };
            Sample { content, ..s.clone() }
        })
        .collect()
}

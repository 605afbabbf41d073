#![allow(dead_code)]

use stagevlm::data::{corpus_vocab, render_synthetic, Sample, SyntheticShapesSpec};
use stagevlm::model::config::VLMConfig;
use stagevlm::model::params::VLMParams;
use stagevlm::training::StageData;

pub fn corpus(n: usize, seed: u64) -> Vec<Sample> {
    render_synthetic(&SyntheticShapesSpec::default(), n, seed).unwrap()
}

pub fn stage_data(n: usize, seed: u64) -> StageData {
    let samples = corpus(n, seed);
    let vocab = corpus_vocab(&samples, VLMConfig::desk().decoder.vocab).unwrap();
    StageData::new(samples, vocab).unwrap()
}

pub fn desk_params(seed: u64) -> VLMParams {
    VLMParams::init(&VLMConfig::desk(), seed).unwrap()
}

//! Full-model gradient check on a reduced configuration, including the
//! negative control. The desk-sized run lives in the acceptance target.

mod common;

use stagevlm::data::{encode_caption, Vocab};
use stagevlm::gradcheck::{check_model, DEFAULT_STEP, RTOL};
use stagevlm::model::config::{DecoderConfig, VLMConfig, VisionEncoderConfig};
use stagevlm::model::params::{Component, VLMParams};

fn tiny() -> VLMConfig {
    VLMConfig {
        vision: VisionEncoderConfig {
            image_size: 32,
            patch_size: 16,
            hidden: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2.0,
        },
        decoder: DecoderConfig {
            hidden: 8,
            intermediate: 16,
            layers: 2,
            heads: 2,
            kv_heads: 1,
            vocab: 32,
            max_positions: 32,
        },
        ..VLMConfig::desk()
    }
}

fn run(fault: Option<f64>) -> stagevlm::gradcheck::ModelReport {
    let sample = common::corpus(1, 9).remove(0);
    let caption = sample.content.texts()[0].to_string();
    let vocab = Vocab::build([caption.as_str()], 32).unwrap();
    let text = encode_caption(&vocab, &caption).unwrap();
    let params = VLMParams::init(&tiny(), 4).unwrap();
    check_model(&params, &sample.image, &text, DEFAULT_STEP, fault).unwrap()
}

#[test]
fn every_leaf_matches_finite_differences() {
    let report = run(None);
    assert_eq!(report.elements, tiny().param_counts().total());
    assert!(report.passed(), "max error {:e}", report.max_error());
    let worst = report.worst_per_component();
    assert_eq!(worst.iter().map(|(c, _)| *c).collect::<Vec<_>>(), Component::ALL);
}

#[test]
fn wrong_gelu_rule_is_caught() {
    let report = run(Some(1.1));
    assert!(!report.passed());
    assert!(report.max_error() > RTOL);
}

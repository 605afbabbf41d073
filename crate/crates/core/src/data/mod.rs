//! Tokenization, corpora and batching.

pub mod batch;
pub mod image;
pub mod jsonl;
pub mod sample;
pub mod synthetic;
pub mod vocab;

pub use batch::{build_batch, collate, Batch};
pub use image::Image;
pub use jsonl::{load_jsonl, write_corpus};
pub use sample::{encode_caption, encode_content, format_conversation, Content, Encoded, Sample, Turn};
pub use synthetic::{render_synthetic, SyntheticShapesSpec};
pub use vocab::Vocab;

/// Vocabulary covering every text in `samples`.
pub fn corpus_vocab(samples: &[Sample], capacity: usize) -> crate::error::Result<Vocab> {
    Vocab::build(samples.iter().flat_map(|s| s.content.texts()), capacity)
}

use std::sync::Arc;

use crate::data::image::Image;
use crate::data::sample::{encode_content, Encoded, Sample};
use crate::data::vocab::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::graph::IGNORE_INDEX;
use crate::masks::SegmentLayout;
use crate::model::config::VLMConfig;

/// A padded group of samples. Rows of `labels` span the whole decoder
/// sequence (image prefix, then text), so they line up with `layouts`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<Arc<Image>>,
    /// `[batch, max_text]`, right-padded with `<pad>`.
    pub tokens: Vec<Vec<u32>>,
    /// `[batch, num_patches + max_text]`.
    pub labels: Vec<Vec<i64>>,
    pub layouts: Vec<SegmentLayout>,
    /// Position of each sample in its dataset; seeds per-sample noise.
    pub sample_index: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Non-pad text tokens of sample `i`.
    pub fn text(&self, i: usize) -> &[u32] {
        let pad = self.pad_len(i);
        &self.tokens[i][..self.text_len() - pad]
    }

    pub fn pad_len(&self, i: usize) -> usize {
        self.layouts[i].count(crate::masks::SegmentKind::Pad)
    }

    pub fn supervised(&self) -> usize {
        self.labels.iter().flatten().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Pads pre-encoded samples into a batch. `items` pairs each sample's
/// dataset index with its image and encoding.
pub fn collate(items: &[(usize, Arc<Image>, &Encoded)], cfg: &VLMConfig) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::Input("cannot build an empty batch".into()));
    }
    let patches = cfg.vision.num_patches();
    let max_text = items.iter().map(|(_, _, e)| e.len()).max().unwrap_or(0);
    if patches + max_text > cfg.decoder.max_positions {
        return Err(Error::SequenceTooLong {
            len: patches + max_text,
            max: cfg.decoder.max_positions,
        });
    }
    let mut batch = Batch {
        images: Vec::with_capacity(items.len()),
        tokens: Vec::with_capacity(items.len()),
        labels: Vec::with_capacity(items.len()),
        layouts: Vec::with_capacity(items.len()),
        sample_index: Vec::with_capacity(items.len()),
    };
    for (index, image, enc) in items {
        let pad = max_text - enc.len();
        let mut tokens = enc.ids.clone();
        tokens.resize(max_text, PAD);
        let mut labels = vec![IGNORE_INDEX; patches];
        labels.extend(&enc.labels);
        labels.resize(patches + max_text, IGNORE_INDEX);
        batch.images.push(image.clone());
        batch.tokens.push(tokens);
        batch.labels.push(labels);
        batch.layouts.push(SegmentLayout::image_prefix(patches, enc.len(), pad)?);
        batch.sample_index.push(*index);
    }
    Ok(batch)
}

/// Encodes and pads `samples`; sample `k` gets dataset index `first_index + k`.
pub fn build_batch(samples: &[Sample], vocab: &Vocab, cfg: &VLMConfig, first_index: usize) -> Result<Batch> {
    let encoded = samples
        .iter()
        .map(|s| encode_content(vocab, &s.content))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = samples
        .iter()
        .zip(&encoded)
        .enumerate()
        .map(|(k, (s, e))| (first_index + k, s.image.clone(), e))
        .collect();
    collate(&items, cfg)
}

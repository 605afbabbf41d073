use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::image::Image;
use crate::data::vocab::EOS;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::masks::{MaskCache, MaskKind};
use crate::model::forward::BoundModel;
use crate::model::params::VLMParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    /// Argmax, ties to the lowest id.
    Greedy,
    /// Sample from the renormalized `k` most likely tokens.
    TopK { k: usize, seed: u64 },
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(row: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower ids first among equal logits
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    order.truncate(k.max(1));
    let top = row[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (row[i] - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *order.last().unwrap()
}

/// Continues `prompt` token by token until `<eos>` or `max_new` new tokens.
/// The returned ids exclude the prompt and the `<eos>`.
pub fn generate(params: &VLMParams, image: &Image, prompt: &[u32], max_new: usize, mode: DecodeMode) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::Input("max_new must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Input("prompt must contain at least one token".into()));
    }
    let mut masks = MaskCache::new();
    let projected = {
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, params, |_| false);
        let v = m.encode_image(&mut g, image, &mut masks)?;
        let p = m.project(&mut g, v)?;
        g.tensor(p)
    };
    let mut rng = match mode {
        DecodeMode::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let max_text = params.config.decoder.max_positions - params.config.vision.num_patches();
    if prompt.len() > max_text {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + params.config.vision.num_patches(),
            max: params.config.decoder.max_positions,
        });
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && ids.len() <= max_text {
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, params, |_| false);
        let p = g.constant(&projected);
        let (input, layout) = m.assemble(&mut g, p, &ids, 0)?;
        let bias = g.constant(&*masks.bias(&layout, MaskKind::ImageBidiTextCausal)?);
        let hidden = m.decoder_hidden_rows(&mut g, input, bias, Some(&[layout.total_len() - 1]))?;
        let logits = m.head(&mut g, hidden, None)?;
        let row = g.value(logits);
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::TopK { k, .. }, Some(rng)) => sample_top_k(row, k, rng),
            _ => argmax(row),
        } as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

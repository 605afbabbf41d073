//! Forward pass of encoder, projector and decoder on a [`Graph`].

use std::cell::RefCell;

use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masks::{MaskCache, MaskKind, Segment, SegmentKind, SegmentLayout};
use crate::model::config::VisionEncoderConfig;
use crate::model::params::{AttentionIds, BlockIds, Component, LinearIds, NormIds, VLMParams};
use crate::tensor::Tensor;

/// Non-overlapping patches in row-major scan order, each flattened
/// channel-major: `[num_patches, 3·p·p]`.
pub fn patchify(image: &Image, cfg: &VisionEncoderConfig) -> Result<Tensor> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::Input(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.patches_per_side();
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        data.push(image.pixel(c, py * p + y, px * p + x));
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// Model parameters copied onto a graph as leaves.
pub struct BoundModel<'a> {
    params: &'a VLMParams,
    vars: Vec<Var>,
    attention_log: RefCell<Option<Vec<Var>>>,
}

impl<'a> BoundModel<'a> {
    /// Leaves of components for which `trainable` is true require grad.
    pub fn bind(g: &mut Graph, params: &'a VLMParams, trainable: impl Fn(Component) -> bool) -> Self {
        let vars = params
            .params()
            .iter()
            .map(|p| {
                if trainable(p.component) {
                    g.leaf(&p.tensor.clone().with_requires_grad(true))
                } else {
                    g.constant(&p.tensor)
                }
            })
            .collect();
        BoundModel {
            params,
            vars,
            attention_log: RefCell::new(None),
        }
    }

    /// Starts recording the attention weight matrix of every head, in
    /// evaluation order, until [`Self::take_attention_log`].
    pub fn log_attention(&self) {
        *self.attention_log.borrow_mut() = Some(Vec::new());
    }

    pub fn take_attention_log(&self) -> Vec<Var> {
        self.attention_log.borrow_mut().take().unwrap_or_default()
    }

    pub fn params(&self) -> &VLMParams {
        self.params
    }

    /// Leaf for parameter `index` (declaration order).
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, g: &mut Graph, x: Var, ids: LinearIds) -> Result<Var> {
        let y = g.matmul(x, self.vars[ids.weight])?;
        match ids.bias {
            Some(b) => g.add_row(y, self.vars[b]),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, ids: NormIds) -> Result<Var> {
        g.layer_norm(x, self.vars[ids.gain], self.vars[ids.offset], self.params.config.layer_norm_eps)
    }

    /// Grouped-query self-attention; with `kv_heads == heads` it is plain
    /// multi-head attention. `query_rows` restricts the output to those
    /// positions (keys and values still cover every row).
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        x: Var,
        ids: &AttentionIds,
        heads: usize,
        kv_heads: usize,
        bias: Var,
        query_rows: Option<&[usize]>,
    ) -> Result<Var> {
        let d = g.shape(x)[1];
        let head_dim = d / heads;
        let group = heads / kv_heads;
        let (xq, bias) = match query_rows {
            Some(r) => (g.gather_rows(x, r)?, g.gather_rows(bias, r)?),
            None => (x, bias),
        };
        let q = self.linear(g, xq, ids.q)?;
        let q = g.scale(q, 1.0 / (head_dim as f64).sqrt())?;
        let k = self.linear(g, x, ids.k)?;
        let v = self.linear(g, x, ids.v)?;
        let mut kv = Vec::with_capacity(kv_heads);
        for h in 0..kv_heads {
            kv.push((g.slice_cols(k, h * head_dim, head_dim)?, g.slice_cols(v, h * head_dim, head_dim)?));
        }
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (kh, vh) = kv[h / group];
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let weights = g.softmax_rows(scores, bias)?;
            if let Some(log) = self.attention_log.borrow_mut().as_mut() {
                log.push(weights);
            }
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.linear(g, merged, ids.out)
    }

    /// Pre-norm transformer block, evaluated only at `rows` when given.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        x: Var,
        ids: &BlockIds,
        heads: usize,
        kv_heads: usize,
        bias: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let h = self.norm(g, x, ids.norm1)?;
        let a = self.attention(g, h, &ids.attn, heads, kv_heads, bias, rows)?;
        let x = match rows {
            Some(r) => g.gather_rows(x, r)?,
            None => x,
        };
        let x = g.add(x, a)?;
        let h = self.norm(g, x, ids.norm2)?;
        let h = self.linear(g, h, ids.fc1)?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, ids.fc2)?;
        g.add(x, h)
    }

    /// Vision embeddings `V: [num_patches, d_V]` from patchified pixels.
    pub fn encode_patches(&self, g: &mut Graph, patches: Var, masks: &mut MaskCache) -> Result<Var> {
        let cfg = &self.params.config.vision;
        let ids = self.params.ids();
        let layout = SegmentLayout::new(vec![Segment {
            kind: SegmentKind::Image,
            len: cfg.num_patches(),
        }])?;
        let bias = g.constant(&*masks.bias(&layout, MaskKind::FullBidirectional)?);
        let x = self.linear(g, patches, ids.patch_embed)?;
        let mut x = g.add(x, self.vars[ids.vision_pos])?;
        for block in &ids.vision_blocks {
            x = self.block(g, x, block, cfg.heads, cfg.heads, bias, None)?;
        }
        self.norm(g, x, ids.vision_norm)
    }

    pub fn encode_image(&self, g: &mut Graph, image: &Image, masks: &mut MaskCache) -> Result<Var> {
        let patches = g.constant(&patchify(image, &self.params.config.vision)?);
        self.encode_patches(g, patches, masks)
    }

    /// `P = W₂·gelu(W₁·V + b₁) + b₂`, rowwise.
    pub fn project(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let ids = self.params.ids();
        if g.shape(v).get(1) != Some(&self.params.config.vision.hidden) {
            return Err(Error::shape("project", format!("input {:?}", g.shape(v))));
        }
        let h = self.linear(g, v, ids.proj_fc1)?;
        let h = g.gelu(h)?;
        self.linear(g, h, ids.proj_fc2)
    }

    /// Image rows followed by embedded text rows. The last `pad` entries of
    /// `text_ids` are padding.
    pub fn assemble(&self, g: &mut Graph, p: Var, text_ids: &[u32], pad: usize) -> Result<(Var, SegmentLayout)> {
        let dec = &self.params.config.decoder;
        if text_ids.len() <= pad {
            return Err(Error::Input("text must contain at least one non-pad token".into()));
        }
        let len = g.shape(p)[0] + text_ids.len();
        if len > dec.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                max: dec.max_positions,
            });
        }
        if let Some(&bad) = text_ids.iter().find(|&&t| t as usize >= dec.vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                len: dec.vocab,
            });
        }
        let rows: Vec<usize> = text_ids.iter().map(|&t| t as usize).collect();
        let text = g.gather_rows(self.vars[self.params.ids().token_embed], &rows)?;
        let input = g.concat_rows(&[p, text])?;
        let layout = SegmentLayout::image_prefix(g.shape(p)[0], text_ids.len() - pad, pad)?;
        Ok((input, layout))
    }

    /// Decoder stack up to and including the final norm.
    pub fn decoder_hidden(&self, g: &mut Graph, input: Var, bias: Var) -> Result<Var> {
        self.decoder_hidden_rows(g, input, bias, None)
    }

    /// [`Self::decoder_hidden`] restricted to `rows`, in that order. Earlier
    /// blocks still run over every position; the last block only computes
    /// the requested ones.
    pub fn decoder_hidden_rows(&self, g: &mut Graph, input: Var, bias: Var, rows: Option<&[usize]>) -> Result<Var> {
        let dec = &self.params.config.decoder;
        let ids = self.params.ids();
        let len = g.shape(input)[0];
        if g.shape(bias) != [len, len] {
            return Err(Error::shape(
                "decoder_forward",
                format!("mask {:?} for sequence of {len}", g.shape(bias)),
            ));
        }
        if len > dec.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                max: dec.max_positions,
            });
        }
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(self.vars[ids.text_pos], &positions)?;
        let mut x = g.add(input, pos)?;
        if let Some(&bad) = rows.and_then(|r| r.iter().find(|&&i| i >= len)) {
            return Err(Error::IndexOutOfRange { index: bad, len });
        }
        let last = ids.decoder_blocks.len().saturating_sub(1);
        for (i, block) in ids.decoder_blocks.iter().enumerate() {
            let r = if i == last { rows } else { None };
            x = self.block(g, x, block, dec.heads, dec.kv_heads, bias, r)?;
        }
        if ids.decoder_blocks.is_empty() {
            if let Some(r) = rows {
                x = g.gather_rows(x, r)?;
            }
        }
        self.norm(g, x, ids.final_norm)
    }

    /// Vocabulary logits for `rows` of `hidden` (all rows when `None`).
    pub fn head(&self, g: &mut Graph, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => g.gather_rows(hidden, r)?,
            None => hidden,
        };
        self.linear(g, h, self.params.ids().head)
    }

    /// Logits `[len, vocab]` for every position.
    pub fn decoder_forward(&self, g: &mut Graph, input: Var, bias: Var) -> Result<Var> {
        let h = self.decoder_hidden(g, input, bias)?;
        self.head(g, h, None)
    }
}

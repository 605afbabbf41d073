use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square-image ViT encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl VisionEncoderConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Flattened length of one RGB patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden as f64 * self.mlp_ratio).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config("vision mlp_ratio gives an empty MLP".into()));
        }
        Ok(())
    }
}

/// Decoder-only language model with grouped-query attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Query heads sharing each key/value head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab < crate::data::vocab::RESERVED.len() {
            return Err(Error::Config(format!("vocab {} smaller than reserved token set", self.vocab)));
        }
        if self.intermediate == 0 || self.max_positions == 0 {
            return Err(Error::Config("intermediate and max_positions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VLMConfig {
    pub vision: VisionEncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-6
}

/// Parameter totals per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentCounts {
    pub vision: usize,
    pub projector: usize,
    pub language: usize,
}

impl ComponentCounts {
    pub fn total(&self) -> usize {
        self.vision + self.projector + self.language
    }
}

impl VLMConfig {
    /// Trainable on one CPU core in minutes.
    pub fn desk() -> Self {
        VLMConfig {
            vision: VisionEncoderConfig {
                image_size: 32,
                patch_size: 8,
                hidden: 64,
                layers: 2,
                heads: 4,
                mlp_ratio: 2.0,
            },
            decoder: DecoderConfig {
                hidden: 64,
                intermediate: 256,
                layers: 2,
                heads: 4,
                kv_heads: 2,
                vocab: 512,
                max_positions: 128,
            },
            layer_norm_eps: default_eps(),
        }
    }

    /// SigLIP-so400m encoder and Qwen2.5-0.5B-shaped decoder. Stored for
    /// parameter accounting; never instantiated.
    pub fn paper() -> Self {
        VLMConfig {
            vision: VisionEncoderConfig {
                image_size: 224,
                patch_size: 14,
                hidden: 1152,
                layers: 27,
                heads: 16,
                // so400m MLP width 4304
                mlp_ratio: 4304.0 / 1152.0,
            },
            decoder: DecoderConfig {
                hidden: 896,
                intermediate: 4864,
                layers: 24,
                heads: 14,
                kv_heads: 2,
                vocab: 151_936,
                max_positions: 32_768,
            },
            layer_norm_eps: default_eps(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected desk or paper"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.decoder.validate()?;
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Exact parameter counts computed from shapes alone.
    pub fn param_counts(&self) -> ComponentCounts {
        let v = &self.vision;
        let linear = |i: usize, o: usize, bias: bool| i * o + if bias { o } else { 0 };
        let norm = |d: usize| 2 * d;
        let d = v.hidden;
        let enc_block = norm(d) + 4 * linear(d, d, true) + norm(d) + linear(d, v.mlp_hidden(), true) + linear(v.mlp_hidden(), d, true);
        let vision = linear(v.patch_dim(), d, true) + v.num_patches() * d + v.layers * enc_block + norm(d);

        let l = &self.decoder;
        let projector = linear(d, l.hidden, true) + linear(l.hidden, l.hidden, true);

        let h = l.hidden;
        let kv = l.kv_heads * l.head_dim();
        let dec_block = norm(h)
            + linear(h, h, true)
            + 2 * linear(h, kv, true)
            + linear(h, h, false)
            + norm(h)
            + linear(h, l.intermediate, true)
            + linear(l.intermediate, h, true);
        let language = l.vocab * h + l.max_positions * h + l.layers * dec_block + norm(h) + linear(h, l.vocab, false);
        ComponentCounts {
            vision,
            projector,
            language,
        }
    }
}

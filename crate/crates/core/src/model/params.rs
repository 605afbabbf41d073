use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::VLMConfig;
use crate::tensor::Tensor;

/// Which of the three sub-networks a parameter belongs to. Freezing and
/// per-component learning rates are keyed on this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Vision,
    Projector,
    Language,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Vision, Component::Projector, Component::Language];

    pub fn tag(self) -> u8 {
        match self {
            Component::Vision => 0,
            Component::Projector => 1,
            Component::Language => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Vision => "vision",
            Component::Projector => "projector",
            Component::Language => "language",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gain: usize,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub out: LinearIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub norm1: NormIds,
    pub attn: AttentionIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub patch_embed: LinearIds,
    pub vision_pos: usize,
    pub vision_blocks: Vec<BlockIds>,
    pub vision_norm: NormIds,
    pub proj_fc1: LinearIds,
    pub proj_fc2: LinearIds,
    pub token_embed: usize,
    pub text_pos: usize,
    pub decoder_blocks: Vec<BlockIds>,
    pub final_norm: NormIds,
    pub head: LinearIds,
}

/// Every learnable tensor of the model, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct VLMParams {
    pub config: VLMConfig,
    params: Vec<Param>,
    ids: ParamIds,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: Option<&'a mut ChaCha8Rng>,
}

const EMBED_STD: f64 = 0.02;

impl Builder<'_> {
    fn push(&mut self, name: String, component: Component, shape: &[usize], std: f64) -> usize {
        let tensor = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::randn(shape, std, rng),
            None => Tensor::zeros(shape),
        };
        self.params.push(Param {
            name,
            component,
            tensor,
        });
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, c: Component, fan_in: usize, fan_out: usize, bias: bool) -> LinearIds {
        let weight = self.push(format!("{name}.weight"), c, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let bias = bias.then(|| self.push(format!("{name}.bias"), c, &[fan_out], 0.0));
        LinearIds { weight, bias }
    }

    fn norm(&mut self, name: &str, c: Component, d: usize) -> NormIds {
        let gain = self.push(format!("{name}.gain"), c, &[d], 0.0);
        self.params[gain].tensor = Tensor::ones(&[d]);
        let offset = self.push(format!("{name}.offset"), c, &[d], 0.0);
        NormIds { gain, offset }
    }

    fn block(&mut self, prefix: &str, c: Component, d: usize, kv: usize, mlp: usize, out_bias: bool) -> BlockIds {
        BlockIds {
            norm1: self.norm(&format!("{prefix}.norm1"), c, d),
            attn: AttentionIds {
                q: self.linear(&format!("{prefix}.attn.q"), c, d, d, true),
                k: self.linear(&format!("{prefix}.attn.k"), c, d, kv, true),
                v: self.linear(&format!("{prefix}.attn.v"), c, d, kv, true),
                out: self.linear(&format!("{prefix}.attn.out"), c, d, d, out_bias),
            },
            norm2: self.norm(&format!("{prefix}.norm2"), c, d),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), c, d, mlp, true),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), c, mlp, d, true),
        }
    }
}

impl VLMParams {
    /// Random initialization, a pure function of `(config, seed)`.
    pub fn init(config: &VLMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, Some(&mut rng)))
    }

    pub fn zeros(config: &VLMConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, None))
    }

    fn build(config: &VLMConfig, rng: Option<&mut ChaCha8Rng>) -> Self {
        use Component::*;
        let mut b = Builder { params: Vec::new(), rng };
        let v = &config.vision;
        let l = &config.decoder;

        let patch_embed = b.linear("vision.patch_embed", Vision, v.patch_dim(), v.hidden, true);
        let vision_pos = b.push("vision.pos_embed".into(), Vision, &[v.num_patches(), v.hidden], EMBED_STD);
        let vision_blocks = (0..v.layers)
            .map(|i| b.block(&format!("vision.blocks.{i}"), Vision, v.hidden, v.hidden, v.mlp_hidden(), true))
            .collect();
        let vision_norm = b.norm("vision.norm", Vision, v.hidden);

        let proj_fc1 = b.linear("projector.fc1", Projector, v.hidden, l.hidden, true);
        let proj_fc2 = b.linear("projector.fc2", Projector, l.hidden, l.hidden, true);

        let token_embed = b.push("language.token_embed".into(), Language, &[l.vocab, l.hidden], EMBED_STD);
        let text_pos = b.push("language.pos_embed".into(), Language, &[l.max_positions, l.hidden], EMBED_STD);
        let kv = l.kv_heads * l.head_dim();
        let decoder_blocks = (0..l.layers)
            .map(|i| b.block(&format!("language.blocks.{i}"), Language, l.hidden, kv, l.intermediate, false))
            .collect();
        let final_norm = b.norm("language.norm", Language, l.hidden);
        let head_weight = b.push("language.head.weight".into(), Language, &[l.hidden, l.vocab], EMBED_STD);

        VLMParams {
            config: config.clone(),
            params: b.params,
            ids: ParamIds {
                patch_embed,
                vision_pos,
                vision_blocks,
                vision_norm,
                proj_fc1,
                proj_fc2,
                token_embed,
                text_pos,
                decoder_blocks,
                final_norm,
                head: LinearIds {
                    weight: head_weight,
                    bias: None,
                },
            },
        }
    }

    /// Replaces every tensor from `(name, component, tensor)` triples that
    /// must match this config's declaration order exactly.
    pub fn from_named(config: &VLMConfig, named: Vec<Param>) -> Result<Self> {
        let mut out = Self::zeros(config)?;
        if named.len() != out.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                out.params.len(),
                named.len()
            )));
        }
        for (slot, p) in out.params.iter_mut().zip(named) {
            if slot.name != p.name || slot.component != p.component || slot.tensor.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} ({:?} {:?}) does not match expected {} ({:?} {:?})",
                    p.name,
                    p.component,
                    p.tensor.shape(),
                    slot.name,
                    slot.component,
                    slot.tensor.shape()
                )));
            }
            slot.tensor = p.tensor;
        }
        Ok(out)
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn counts(&self) -> super::ComponentCounts {
        let count = |c: Component| {
            self.params
                .iter()
                .filter(|p| p.component == c)
                .map(|p| p.tensor.numel())
                .sum()
        };
        super::ComponentCounts {
            vision: count(Component::Vision),
            projector: count(Component::Projector),
            language: count(Component::Language),
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn bitwise_eq_component(&self, other: &VLMParams, c: Component) -> bool {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, _)| a.component == c)
            .all(|(a, b)| a.tensor.bitwise_eq(&b.tensor))
    }
}

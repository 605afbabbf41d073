use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::batch::{collate, Batch};
use crate::data::sample::{encode_content, Encoded, Sample};
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, IGNORE_INDEX};
use crate::masks::{MaskCache, MaskKind};
use crate::model::forward::BoundModel;
use crate::model::params::{Component, VLMParams};
use crate::training::noise::{noise_input, sample_seed};
use crate::training::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamW, OptimizerState};
use crate::training::StageConfig;

/// A dataset with its vocabulary and per-sample encodings.
#[derive(Clone, Debug)]
pub struct StageData {
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
    encoded: Vec<Encoded>,
}

impl StageData {
    pub fn new(samples: Vec<Sample>, vocab: Vocab) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("dataset is empty".into()));
        }
        let encoded = samples
            .iter()
            .map(|s| encode_content(&vocab, &s.content))
            .collect::<Result<Vec<_>>>()?;
        Ok(StageData { samples, vocab, encoded })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Batch of the samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize], params: &VLMParams) -> Result<Batch> {
        let items: Vec<_> = indices
            .iter()
            .map(|&i| (i, self.samples[i].image.clone(), &self.encoded[i]))
            .collect();
        collate(&items, &params.config)
    }
}

/// Noise applied to text inputs: `(rate, stage seed, optimizer step)`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
    pub step: usize,
}

/// Token-mean cross-entropy over every supervised position of `batch`.
/// The last decoder block and the head run only on supervised rows.
pub fn micro_batch_loss(
    g: &mut Graph,
    model: &BoundModel,
    batch: &Batch,
    kind: MaskKind,
    noise: Option<NoiseSpec>,
    masks: &mut MaskCache,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    for i in 0..batch.len() {
        let v = model.encode_image(g, &batch.images[i], masks)?;
        let p = model.project(g, v)?;
        let pad = batch.pad_len(i);
        let mut tokens = batch.tokens[i].clone();
        if let Some(n) = noise {
            let text_len = tokens.len() - pad;
            let seed = sample_seed(n.seed, n.step, batch.sample_index[i]);
            let (noised, _) = noise_input(&tokens[..text_len], n.rate, seed);
            tokens[..text_len].copy_from_slice(&noised);
        }
        let (input, layout) = model.assemble(g, p, &tokens, pad)?;
        if layout != batch.layouts[i] {
            return Err(Error::Layout(format!("batch layout {} disagrees with {layout}", batch.layouts[i])));
        }
        let supervised: Vec<usize> = (0..layout.total_len()).filter(|&r| batch.labels[i][r] != IGNORE_INDEX).collect();
        if supervised.is_empty() {
            continue;
        }
        let bias = g.constant(&*masks.bias(&layout, kind)?);
        labels.extend(supervised.iter().map(|&r| batch.labels[i][r]));
        rows.push(model.decoder_hidden_rows(g, input, bias, Some(&supervised))?);
    }
    if rows.is_empty() {
        return Err(Error::AllIgnored);
    }
    let hidden = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let logits = model.head(g, hidden, None)?;
    g.cross_entropy(logits, &labels, IGNORE_INDEX)
}

/// Mean loss of the micro-batches and the clip factor applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub clip_scale: f64,
}

/// Averages gradients over `micro_batches`, clips, and takes one AdamW
/// step with the per-component rates `lr`.
///
/// Each micro-batch loss is already a mean over its own supervised tokens,
/// so the result matches a single batch of all samples only when every
/// micro-batch supervises the same number of tokens.
pub fn accumulate_and_step(
    params: &mut VLMParams,
    opt: &mut OptimizerState,
    micro_batches: &[Batch],
    cfg: &StageConfig,
    lr: impl Fn(Component) -> f64,
    noise: Option<NoiseSpec>,
    masks: &mut MaskCache,
) -> Result<StepStats> {
    if micro_batches.is_empty() {
        return Err(Error::Input("no micro-batches".into()));
    }
    if micro_batches.iter().any(|b| b.is_empty()) {
        return Err(Error::Input("empty micro-batch".into()));
    }
    params.zero_grads();
    let k = micro_batches.len() as f64;
    let mut loss_sum = 0.0;
    for batch in micro_batches {
        let mut g = Graph::new();
        let (loss, grads) = {
            let model = BoundModel::bind(&mut g, params, |c| cfg.trainable(c));
            let loss = micro_batch_loss(&mut g, &model, batch, cfg.mask_kind, noise, masks)?;
            g.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = model
                .vars()
                .iter()
                .map(|&v| {
                    g.requires_grad(v).then(|| match g.grad(v) {
                        Some(gr) => gr.iter().map(|x| x / k).collect(),
                        None => vec![0.0; g.value(v).len()],
                    })
                })
                .collect();
            (g.scalar(loss)?, grads)
        };
        loss_sum += loss;
        for (p, grad) in params.params_mut().iter_mut().zip(grads) {
            if let Some(grad) = grad {
                p.tensor.accumulate_grad(&grad)?;
            }
        }
    }
    let clip_scale = clip_grad_norm(params, cfg.clip_norm)?;
    adamw_step(params, opt, lr, &AdamW::default())?;
    Ok(StepStats {
        loss: loss_sum / k,
        clip_scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub lr_vision: f64,
    pub lr_projector: f64,
    pub lr_language: f64,
    pub loss: f64,
}

pub const CURVE_HEADER: &str = "step,lr_vision,lr_projector,lr_language,loss";

pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in curve {
        // {:?} prints the shortest representation that round-trips
        writeln!(out, "{},{:?},{:?},{:?},{:?}", r.step, r.lr_vision, r.lr_projector, r.lr_language, r.loss).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub curve: Vec<CurveRow>,
    pub checkpoint: Option<PathBuf>,
    pub curve_path: Option<PathBuf>,
}

impl RunOutput {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|r| r.loss)
    }
}

/// Rate of component `c` at `step`; frozen components stay at exactly 0.
fn scheduled_lr(cfg: &StageConfig, c: Component, step: usize, total: usize) -> Result<f64> {
    let peak = cfg.lr(c);
    if peak == 0.0 {
        return Ok(0.0);
    }
    cosine_lr(step, total, peak, cfg.min_lr)
}

/// Trains `params` for one stage. With `out_dir`, writes `curve.csv` and
/// `model.ckpt` there (the checkpoint atomically). `progress` is called
/// after every step.
pub fn run_stage(
    data: &StageData,
    params: &mut VLMParams,
    cfg: &StageConfig,
    seed: u64,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&CurveRow, usize),
) -> Result<RunOutput> {
    cfg.validate()?;
    if data.vocab.len() > params.config.decoder.vocab {
        return Err(Error::VocabOverflow {
            size: data.vocab.len(),
            capacity: params.config.decoder.vocab,
        });
    }
    let total = cfg.total_steps(data.len());
    let mut opt = OptimizerState::new(params, |c| cfg.trainable(c));
    let mut masks = MaskCache::new();
    let mut curve = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, usize::MAX));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for global in order.chunks(cfg.global_batch) {
            let micro = global
                .chunks(cfg.micro_batch)
                .map(|idx| data.batch(idx, params))
                .collect::<Result<Vec<_>>>()?;
            let lv = scheduled_lr(cfg, Component::Vision, step, total)?;
            let lp = scheduled_lr(cfg, Component::Projector, step, total)?;
            let ll = scheduled_lr(cfg, Component::Language, step, total)?;
            let lr_of = |c: Component| match c {
                Component::Vision => lv,
                Component::Projector => lp,
                Component::Language => ll,
            };
            let noise = (cfg.noise_rate > 0.0).then_some(NoiseSpec {
                rate: cfg.noise_rate,
                seed,
                step,
            });
            let stats = accumulate_and_step(params, &mut opt, &micro, cfg, lr_of, noise, &mut masks)?;
            let row = CurveRow {
                step,
                lr_vision: lv,
                lr_projector: lp,
                lr_language: ll,
                loss: stats.loss,
            };
            progress(&row, total);
            curve.push(row);
            step += 1;
        }
    }
    params.zero_grads();
    let mut output = RunOutput {
        curve,
        checkpoint: None,
        curve_path: None,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let curve_path = dir.join("curve.csv");
        checkpoint::write_atomic(&curve_path, curve_csv(&output.curve).as_bytes())?;
        let ckpt = dir.join("model.ckpt");
        checkpoint::save(&ckpt, params, &data.vocab)?;
        output.checkpoint = Some(ckpt);
        output.curve_path = Some(curve_path);
    }
    Ok(output)
}

/// Token-weighted mean cross-entropy of `data` under the prefix mask,
/// without noise, in batches of `batch_size`.
pub fn corpus_loss(params: &VLMParams, data: &StageData, batch_size: usize) -> Result<f64> {
    let mut masks = MaskCache::new();
    let (mut total, mut count) = (0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, params)?;
        let mut g = Graph::new();
        let model = BoundModel::bind(&mut g, params, |_| false);
        let loss = micro_batch_loss(&mut g, &model, &batch, MaskKind::ImageBidiTextCausal, None, &mut masks)?;
        let n = batch.supervised();
        total += g.scalar(loss)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

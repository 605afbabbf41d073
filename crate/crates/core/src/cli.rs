//! Command-line interface: argument definitions and command bodies.
//!
//! Diagnostics go to stderr, results to stdout and files. Every table is
//! written as CSV with a header row, into `--out` or under the default
//! output directory ([`OUT_DIR_ENV`]).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::data::{corpus_vocab, encode_caption, load_jsonl, render_synthetic, write_corpus, Image, Sample, SyntheticShapesSpec, Vocab};
use crate::data::sample::{prompt_ids, Content};
use crate::error::Error;
use crate::gradcheck::{self, ModelReport};
use crate::masks::{build_mask, MaskKind, SegmentLayout};
use crate::metrics;
use crate::model::config::VLMConfig;
use crate::model::generate::{generate, DecodeMode};
use crate::model::params::VLMParams;
use crate::training::trainer::{run_stage, StageData};
use crate::training::StageConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STAGEVLM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "stagevlm", version, about = "Staged vision-language model training on one CPU core")]
pub struct Cli {
    /// Where commands write when no --out is given.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,

    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage and write a checkpoint, loss curve and manifest.
    Train(TrainArgs),
    /// Caption an image, or every image of a corpus.
    Generate(GenerateArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Write the 0/1 attention matrix of a layout.
    MaskDump(MaskDumpArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Mean cross-entropy of two corpora under one checkpoint.
    CompareLoss(CompareLossArgs),
    /// Render a synthetic shapes corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    pub stage: u8,
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSONL corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory [default: <out-dir>/stage<N>]. Must not exist or be empty.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Model and stage preset: desk or paper.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PPM or PNG image.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// JSONL corpus to caption; writes predictions as JSONL.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Instruction; plain captioning without it.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 32, value_parser = at_least_one)]
    pub max_new: usize,
    /// Sample from the k most likely tokens instead of greedy decoding.
    #[arg(long, value_parser = at_least_one)]
    pub topk: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Predictions file for --data [default: <out-dir>/predictions.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions JSONL: {"image_id", "caption"} per line.
    #[arg(long)]
    pub pred: PathBuf,
    /// References JSONL: {"image_id", "captions": [..]} per line.
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long, default_value = "bleu,rouge,cider")]
    pub metrics: String,
    /// [default: <out-dir>/eval.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskDumpArgs {
    /// Segments, e.g. image:2,text:2,pad:1.
    #[arg(long, value_parser = parse_layout)]
    pub layout: SegmentLayout,
    /// full, prefix (stage1..3), causal, interleaved-a or interleaved-b.
    #[arg(long, value_parser = parse_kind)]
    pub kind: MaskKind,
    /// [default: <out-dir>/mask.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "desk", value_parser = ["desk"])]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-leaf report [default: <out-dir>/gradcheck.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scale the GeLU backward rule by this factor (negative control).
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "1.1")]
    pub inject_fault: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CompareLossArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus_a: PathBuf,
    /// Second corpus [default: corpus A with the words of every caption shuffled].
    #[arg(long)]
    pub corpus_b: Option<PathBuf>,
    /// Seed of the word shuffle when --corpus-b is absent.
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    /// [default: <out-dir>/compare_loss.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML description of shapes, colors, sizes and grid.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// [default: <out-dir>/synth]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_layout(s: &str) -> Result<SegmentLayout, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<MaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure of a command; the variant picks the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit code 2.
    Usage(String),
    /// The command ran but could not meet its contract: exit code 1.
    Failed(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Failed(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Failed(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Context {
        out_dir: cli.out_dir,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Train(a) => ctx.train(a),
        Command::Generate(a) => ctx.generate(a),
        Command::Eval(a) => ctx.eval(a),
        Command::MaskDump(a) => ctx.mask_dump(a),
        Command::Gradcheck(a) => ctx.gradcheck(a),
        Command::CompareLoss(a) => ctx.compare_loss(a),
        Command::Synth(a) => ctx.synth(a),
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

struct Context {
    out_dir: PathBuf,
    quiet: bool,
}

impl Context {
    fn out_file(&self, out: Option<PathBuf>, name: &str) -> PathBuf {
        out.unwrap_or_else(|| self.out_dir.join(name))
    }

    fn note(&self, msg: impl fmt::Display) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn train(&self, a: TrainArgs) -> CliResult<()> {
        let file = match &a.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        let preset = a.preset.clone().or(file.preset.clone()).unwrap_or_else(|| "desk".into());
        let model = match &file.model {
            Some(m) => {
                m.validate()?;
                m.clone()
            }
            None => VLMConfig::preset(&preset)?,
        };
        let mut stage = StageConfig::preset(&preset, a.stage)?;
        file.stage.apply(&mut stage);
        if let Some(e) = a.epochs {
            stage.epochs = e;
        }
        stage.validate()?;
        let seed = a.seed.or(file.seed).unwrap_or(0);

        let samples = load_jsonl(&a.data, None, &model.vision)?;
        let (mut params, vocab) = match &a.resume {
            Some(path) => {
                let (params, vocab) = checkpoint::load(path)?;
                let diff = config_diff(&model, &params.config);
                if !diff.is_empty() {
                    return Err(Error::Config(format!(
                        "checkpoint {} does not match the run configuration: {}",
                        path.display(),
                        diff.join(", ")
                    ))
                    .into());
                }
                let vocab = vocab.extended(samples.iter().flat_map(|s| s.content.texts()), model.decoder.vocab)?;
                (params, vocab)
            }
            None => (VLMParams::init(&model, seed)?, corpus_vocab(&samples, model.decoder.vocab)?),
        };
        let data = StageData::new(samples, vocab)?;

        let out = a.out.clone().unwrap_or_else(|| self.out_dir.join(format!("stage{}", a.stage)));
        let staging = staging_dir(&out)?;
        let result = (|| {
            let every = (stage.total_steps(data.len()) / 10).max(1);
            let run = run_stage(&data, &mut params, &stage, seed, Some(&staging), |row, total| {
                if row.step % every == 0 || row.step + 1 == total {
                    self.note(format_args!("step {}/{total} loss {:.4}", row.step + 1, row.loss));
                }
            })?;
            let ckpt_bytes = fs::read(staging.join("model.ckpt")).map_err(|e| Error::io(&staging, e))?;
            let manifest = json!({
                "command": "train",
                "preset": preset,
                "stage": a.stage,
                "seed": seed,
                "data": a.data,
                "resume": a.resume,
                "samples": data.len(),
                "vocab_size": data.vocab.len(),
                "model": model,
                "stage_config": stage,
                "steps": run.curve.len(),
                "initial_loss": run.curve.first().map(|r| r.loss),
                "final_loss": run.final_loss(),
                "checkpoint_sha256": hex(&sha2_digest(&ckpt_bytes)),
            });
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            checkpoint::write_atomic(&staging.join("manifest.json"), text.as_bytes())?;
            Ok::<_, Error>(run)
        })();
        let run = match result {
            Ok(run) => run,
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                return Err(e.into());
            }
        };
        if out.exists() {
            fs::remove_dir(&out).map_err(|e| Error::io(&out, e))?;
        }
        fs::rename(&staging, &out).map_err(|e| Error::io(&out, e))?;
        println!("checkpoint {}", out.join("model.ckpt").display());
        println!("curve {}", out.join("curve.csv").display());
        if let Some(l) = run.final_loss() {
            println!("final loss {l:.6}");
        }
        Ok(())
    }

    fn generate(&self, a: GenerateArgs) -> CliResult<()> {
        let (params, vocab) = checkpoint::load(&a.ckpt)?;
        let prompt = match &a.prompt {
            Some(text) => {
                let (_, unknown) = vocab.encode_lossy(text);
                if !unknown.is_empty() {
                    eprintln!("warning: prompt words not in the vocabulary, using <unk>: {}", unknown.join(" "));
                }
                prompt_ids(&vocab, Some(text))
            }
            None => prompt_ids(&vocab, None),
        };
        let mode = |i: u64| match a.topk {
            Some(k) => DecodeMode::TopK {
                k,
                seed: a.seed.wrapping_add(i),
            },
            None => DecodeMode::Greedy,
        };
        let max_new = a.max_new;
        if let Some(path) = &a.image {
            let image = Image::read(path)?;
            let ids = generate(&params, &image, &prompt, max_new, mode(0))?;
            println!("{}", vocab.decode(&ids));
            return Ok(());
        }
        let data = a.data.as_ref().expect("clap requires --image or --data");
        let samples = load_jsonl(data, None, &params.config.vision)?;
        let out = self.out_file(a.out, "predictions.jsonl");
        let mut text = String::new();
        for (i, s) in samples.iter().enumerate() {
            let ids = generate(&params, &s.image, &prompt, max_new, mode(i as u64))?;
            let line = json!({ "image_id": s.id, "caption": vocab.decode(&ids) });
            text.push_str(&line.to_string());
            text.push('\n');
        }
        write_output(&out, &text)?;
        println!("predictions {} ({} samples)", out.display(), samples.len());
        Ok(())
    }

    fn eval(&self, a: EvalArgs) -> CliResult<()> {
        let names = metrics::parse_metric_list(&a.metrics).map_err(|e| CliError::Usage(e.to_string()))?;
        let pairs = metrics::load_eval_pairs(&a.pred, &a.refs)?;
        let mut scores = Vec::with_capacity(names.len());
        for name in names {
            scores.push((name, metrics::score(name, &pairs)?));
        }
        let mut csv = String::from("metric,score\n");
        for (name, s) in &scores {
            csv.push_str(&format!("{name},{s:?}\n"));
        }
        let out = self.out_file(a.out, "eval.csv");
        write_output(&out, &csv)?;
        let width = scores.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, s) in &scores {
            println!("{name:<width$}  {s:.4}");
        }
        self.note(format_args!("{} pairs; wrote {}", pairs.len(), out.display()));
        Ok(())
    }

    fn mask_dump(&self, a: MaskDumpArgs) -> CliResult<()> {
        let mask = build_mask(&a.layout, a.kind)?;
        let out = self.out_file(a.out, "mask.csv");
        write_output(&out, &mask.to_csv())?;
        for row in mask.row_strings() {
            println!("{row}");
        }
        Ok(())
    }

    fn gradcheck(&self, a: GradcheckArgs) -> CliResult<()> {
        let params = VLMParams::init(&VLMConfig::preset(&a.preset)?, a.seed)?;
        let spec = SyntheticShapesSpec::default();
        let sample = render_synthetic(&spec, 1, a.seed)?.remove(0);
        let Content::Caption(caption) = &sample.content else {
            unreachable!("synthetic samples are captions")
        };
        let vocab = Vocab::build([caption.as_str()], params.config.decoder.vocab)?;
        let text = encode_caption(&vocab, &gradcheck_text(caption))?;
        self.note(format_args!("checking {} parameters", params.counts().total()));
        let report = gradcheck::check_model(&params, &sample.image, &text, gradcheck::DEFAULT_STEP, a.inject_fault)?;
        let out = self.out_file(a.out, "gradcheck.csv");
        write_output(&out, &gradcheck_csv(&report))?;
        for (c, leaf) in report.worst_per_component() {
            println!(
                "{:<9}  worst {:<28} error {:.3e}  analytic {:.6e}  numeric {:.6e}",
                c.name(),
                leaf.name,
                leaf.max_error,
                leaf.analytic,
                leaf.numeric
            );
        }
        println!(
            "elements {}  max relative error {:.3e}  threshold {:.0e}  elapsed {:.1}s",
            report.elements,
            report.max_error(),
            gradcheck::RTOL,
            report.elapsed.as_secs_f64()
        );
        if report.passed() {
            println!("PASS");
            Ok(())
        } else {
            println!("FAIL");
            Err(Error::GradCheck(format!("max relative error {:.3e} exceeds {:.0e}", report.max_error(), gradcheck::RTOL)).into())
        }
    }

    fn compare_loss(&self, a: CompareLossArgs) -> CliResult<()> {
        let (params, vocab) = checkpoint::load(&a.ckpt)?;
        let samples_a = load_jsonl(&a.corpus_a, None, &params.config.vision)?;
        let (samples_b, label_b) = match &a.corpus_b {
            Some(p) => (load_jsonl(p, None, &params.config.vision)?, p.display().to_string()),
            None => (
                metrics::shuffled_words(&samples_a, a.shuffle_seed),
                format!("{} (words shuffled, seed {})", a.corpus_a.display(), a.shuffle_seed),
            ),
        };
        warn_unknown(&vocab, &samples_a, "corpus A");
        warn_unknown(&vocab, &samples_b, "corpus B");
        let (na, nb) = (samples_a.len(), samples_b.len());
        let data_a = StageData::new(samples_a, vocab.clone())?;
        let data_b = StageData::new(samples_b, vocab)?;
        let cmp = metrics::compare_loss(&params, &data_a, &data_b)?;
        let csv = format!(
            "corpus_a,corpus_b,samples_a,samples_b,mean_ce_a,mean_ce_b,difference\n{},{},{na},{nb},{:?},{:?},{:?}\n",
            csv_field(&a.corpus_a.display().to_string()),
            csv_field(&label_b),
            cmp.loss_a,
            cmp.loss_b,
            cmp.difference()
        );
        let out = self.out_file(a.out, "compare_loss.csv");
        write_output(&out, &csv)?;
        println!("mean CE A  {:.6}  ({na} samples)", cmp.loss_a);
        println!("mean CE B  {:.6}  ({nb} samples)", cmp.loss_b);
        println!("B - A      {:.6}", cmp.difference());
        Ok(())
    }

    fn synth(&self, a: SynthArgs) -> CliResult<()> {
        let spec = match &a.spec {
            Some(p) => SyntheticShapesSpec::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => SyntheticShapesSpec::default(),
        };
        let samples = render_synthetic(&spec, a.n, a.seed)?;
        let dir = a.out.unwrap_or_else(|| self.out_dir.join("synth"));
        let data = write_corpus(&samples, &dir)?;
        let mut refs = String::new();
        for s in &samples {
            let captions: Vec<&str> = s.content.texts();
            refs.push_str(&json!({ "image_id": s.id, "captions": captions }).to_string());
            refs.push('\n');
        }
        let refs_path = dir.join("refs.jsonl");
        write_output(&refs_path, &refs)?;
        println!("data {}", data.display());
        println!("refs {}", refs_path.display());
        Ok(())
    }
}

/// Caption prefix used by `gradcheck`: long enough to exercise text
/// attention, short enough to keep the check under a minute.
fn gradcheck_text(caption: &str) -> String {
    caption.split_whitespace().take(2).collect::<Vec<_>>().join(" ")
}

fn gradcheck_csv(report: &ModelReport) -> String {
    let mut out = String::from("component,leaf,numel,max_error,worst_index,analytic,numeric\n");
    for (c, r) in &report.leaves {
        out.push_str(&format!(
            "{},{},{},{:?},{},{:?},{:?}\n",
            c.name(),
            r.name,
            r.numel,
            r.max_error,
            r.worst_index,
            r.analytic,
            r.numeric
        ));
    }
    out
}

fn warn_unknown(vocab: &Vocab, samples: &[Sample], label: &str) {
    let unknown: usize = samples
        .iter()
        .flat_map(|s| s.content.texts())
        .map(|t| vocab.encode_lossy(t).1.len())
        .sum();
    if unknown > 0 {
        eprintln!("warning: {label} has {unknown} word occurrences outside the vocabulary, scored as <unk>");
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_output(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::write_atomic(path, text.as_bytes())
}

/// Fresh sibling directory that is renamed onto `out` once a run succeeds.
fn staging_dir(out: &Path) -> Result<PathBuf, Error> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            return Err(Error::Input(format!("output directory {} exists and is not empty", out.display())));
        }
    }
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
    Ok(staging)
}

fn sha2_digest(bytes: &[u8]) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).to_vec()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `path: ours vs theirs` for every leaf where two configs differ.
fn config_diff(ours: &VLMConfig, theirs: &VLMConfig) -> Vec<String> {
    fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                for (k, va) in x {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, va, y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} vs {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", &json!(ours), &json!(theirs), &mut out);
    out
}

/// Contents of a `train --config` file.
///
/// ```toml
/// preset = "desk"
/// seed = 3
///
/// [stage]
/// epochs = 20
/// lr_projector = 5e-4
///
/// [model]            # optional, replaces the preset's model entirely
/// layer_norm_eps = 1e-6
/// [model.vision]
/// ...
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub model: Option<VLMConfig>,
    #[serde(default)]
    pub stage: StagePatch,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Stage fields a config file may override. Mask kind and noise rate are
/// fixed by the stage number.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePatch {
    pub lr_vision: Option<f64>,
    pub lr_projector: Option<f64>,
    pub lr_language: Option<f64>,
    pub epochs: Option<usize>,
    pub global_batch: Option<usize>,
    pub micro_batch: Option<usize>,
    pub min_lr: Option<f64>,
    pub clip_norm: Option<f64>,
}

impl StagePatch {
    pub fn apply(&self, cfg: &mut StageConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(lr_vision, lr_projector, lr_language, epochs, global_batch, micro_batch, min_lr, clip_norm);
    }
}

//! Python bindings: masks, metrics, checkpoints and the command line.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use clap::Parser;
use pyo3::prelude::*;

use stagevlm::cli::{run, Cli};
use stagevlm::data::sample::prompt_ids;
use stagevlm::data::vocab::tokenize as tokenize_text;
use stagevlm::data::{load_jsonl, Image, Vocab};
use stagevlm::masks::{build_mask, MaskKind, SegmentLayout};
use stagevlm::metrics::{self, EvalPair};
use stagevlm::model::config::VLMConfig;
use stagevlm::model::generate::{generate, DecodeMode};
use stagevlm::model::params::VLMParams;
use stagevlm::training::StageData;

create_exception!(stagevlm, StageVlmError, PyException, "Raised for any failure inside stagevlm.");

fn py_err(e: impl std::fmt::Display) -> PyErr {
    StageVlmError::new_err(e.to_string())
}

/// Word tokens exactly as the model's vocabulary sees them.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tokenize_text(text)
}

/// Boolean attention matrix for a layout such as ``"image:2,text:2"``.
#[pyfunction]
fn mask(layout: &str, kind: &str) -> PyResult<Vec<Vec<bool>>> {
    let layout: SegmentLayout = layout.parse().map_err(py_err)?;
    let kind: MaskKind = kind.parse().map_err(py_err)?;
    let m = build_mask(&layout, kind).map_err(py_err)?;
    Ok((0..m.side()).map(|i| (0..m.side()).map(|j| m.allow(i, j)).collect()).collect())
}

/// Parameter counts ``(vision, projector, language)`` of a preset.
#[pyfunction]
fn param_counts(preset: &str) -> PyResult<(usize, usize, usize)> {
    let c = VLMConfig::preset(preset).map_err(py_err)?.param_counts();
    Ok((c.vision, c.projector, c.language))
}

fn pairs(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<Vec<EvalPair>> {
    if candidates.len() != references.len() {
        return Err(py_err(format!("{} candidates but {} reference lists", candidates.len(), references.len())));
    }
    candidates
        .iter()
        .zip(&references)
        .map(|(c, r)| EvalPair::from_text(c, r).map_err(py_err))
        .collect()
}

/// Scores candidate captions against reference lists. ``name`` is one of
/// bleu1..bleu4, rouge_l or cider.
#[pyfunction]
fn score(name: &str, candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::score(name, &pairs(candidates, references)?).map_err(py_err)
}

/// A trained model with its vocabulary.
#[pyclass(name = "Checkpoint", module = "stagevlm")]
struct PyCheckpoint {
    params: VLMParams,
    vocab: Vocab,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, vocab) = stagevlm::checkpoint::load(&path).map_err(py_err)?;
        Ok(PyCheckpoint { params, vocab })
    }

    /// Randomly initialized model of a preset, with an empty vocabulary.
    #[staticmethod]
    #[pyo3(signature = (preset = "desk", seed = 0))]
    fn init(preset: &str, seed: u64) -> PyResult<Self> {
        let config = VLMConfig::preset(preset).map_err(py_err)?;
        Ok(PyCheckpoint {
            params: VLMParams::init(&config, seed).map_err(py_err)?,
            vocab: Vocab::default(),
        })
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.vocab.words().to_vec()
    }

    /// Model configuration as JSON.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.params.config).expect("config serializes")
    }

    fn num_params(&self) -> usize {
        self.params.counts().total()
    }

    #[pyo3(signature = (image, prompt = None, max_new = 32, topk = None, seed = 0))]
    fn generate(&self, py: Python<'_>, image: PathBuf, prompt: Option<String>, max_new: usize, topk: Option<usize>, seed: u64) -> PyResult<String> {
        let image = Image::read(&image).map_err(py_err)?;
        let ids = prompt_ids(&self.vocab, prompt.as_deref());
        let mode = match topk {
            Some(k) => DecodeMode::TopK { k, seed },
            None => DecodeMode::Greedy,
        };
        let out = py.detach(|| generate(&self.params, &image, &ids, max_new, mode)).map_err(py_err)?;
        Ok(self.vocab.decode(&out))
    }

    /// Mean per-token cross-entropy of a JSONL corpus.
    fn mean_ce(&self, py: Python<'_>, corpus: PathBuf) -> PyResult<f64> {
        let samples = load_jsonl(&corpus, None, &self.params.config.vision).map_err(py_err)?;
        let data = StageData::new(samples, self.vocab.clone()).map_err(py_err)?;
        py.detach(|| metrics::corpus_mean_ce(&self.params, &data)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(params={}, vocab={})", self.params.counts().total(), self.vocab.len())
    }
}

/// Runs a command line such as ``["train", "--stage", "0", ...]`` and
/// returns its exit code.
#[pyfunction]
fn main(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("stagevlm".to_string()).chain(args);
    match Cli::try_parse_from(argv) {
        Ok(cli) => match py.detach(|| run(cli)) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code() as i32
            }
        },
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

#[pymodule]
#[pyo3(name = "stagevlm")]
fn stagevlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StageVlmError", m.py().get_type::<StageVlmError>())?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(mask, m)?)?;
    m.add_function(wrap_pyfunction!(param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}

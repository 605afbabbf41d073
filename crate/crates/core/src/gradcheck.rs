//! Central-difference gradient verification.
//!
//! The numeric side only ever evaluates forwards; it never touches the
//! backward rules it is checking.

use std::time::{Duration, Instant};

use crate::data::image::Image;
use crate::data::batch::collate;
use crate::data::sample::Encoded;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masks::{MaskCache, MaskKind};
use crate::model::forward::BoundModel;
use crate::model::params::{Component, VLMParams};
use crate::tensor::Tensor;
use crate::training::trainer::micro_batch_loss;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Absolute and relative tolerances of the full-model check.
pub const ATOL: f64 = 1e-6;
pub const RTOL: f64 = 1e-3;

/// Worst element of one leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafReport {
    pub name: String,
    pub numel: usize,
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|analytic − numeric| / (|numeric| + floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + floor)
}

/// Compares the backward gradient of scalar `f(x)` against central
/// differences with step `h` and returns the largest [`relative_error`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(&x.clone().with_requires_grad(true));
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let report = check_leaf(&mut g, loss, "x", leaf, h, floor)?;
    Ok(report.max_error)
}

/// Checks every element of `leaf` on an already back-propagated graph.
pub fn check_leaf(g: &mut Graph, loss: Var, name: &str, leaf: Var, h: f64, floor: f64) -> Result<LeafReport> {
    let numel = g.value(leaf).len();
    let analytic = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
    let mut report = LeafReport {
        name: name.to_string(),
        numel,
        max_error: 0.0,
        worst_index: 0,
        analytic: analytic[0],
        numeric: 0.0,
    };
    let mut first = true;
    let indices: Vec<usize> = (0..numel).collect();
    for chunk in indices.chunks(OVERRIDE_BATCH) {
        let numeric = central_differences(g, loss, leaf, chunk, h)?;
        for (&idx, numeric) in chunk.iter().zip(numeric) {
            let a = analytic[idx];
            let err = relative_error(a, numeric, floor);
            if first || err > report.max_error {
                first = false;
                report.max_error = err;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Elements perturbed together in one batched evaluation.
const OVERRIDE_BATCH: usize = 8;

/// Central differences of `loss` for several elements of `leaf`.
pub fn central_differences(g: &mut Graph, loss: Var, leaf: Var, indices: &[usize], h: f64) -> Result<Vec<f64>> {
    let base = g.value(leaf).to_vec();
    let overrides: Vec<(usize, f64)> = indices
        .iter()
        .flat_map(|&i| [(i, base[i] + h), (i, base[i] - h)])
        .collect();
    let values = g.eval_with_overrides(leaf, &overrides, loss)?;
    values
        .chunks(2)
        .map(|pm| {
            let d = (pm[0] - pm[1]) / (2.0 * h);
            if d.is_finite() {
                Ok(d)
            } else {
                Err(Error::NonFinite { op: "central_difference" })
            }
        })
        .collect()
}

pub fn central_difference(g: &mut Graph, loss: Var, leaf: Var, idx: usize, h: f64) -> Result<f64> {
    let base = g.value(leaf)[idx];
    let plus = g.eval_with_override(leaf, idx, base + h, loss)?;
    let minus = g.eval_with_override(leaf, idx, base - h, loss)?;
    let d = (plus - minus) / (2.0 * h);
    if !d.is_finite() {
        return Err(Error::NonFinite { op: "central_difference" });
    }
    Ok(d)
}

/// Outcome of [`check_model`].
#[derive(Clone, Debug)]
pub struct ModelReport {
    pub leaves: Vec<(Component, LeafReport)>,
    pub elements: usize,
    pub elapsed: Duration,
}

impl ModelReport {
    /// Largest error over every checked element, measured with floor
    /// `ATOL / RTOL` so that `max_error <= RTOL` is exactly
    /// `|a - n| <= ATOL + RTOL·|n|` everywhere.
    pub fn max_error(&self) -> f64 {
        self.leaves.iter().map(|(_, r)| r.max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= RTOL
    }

    /// Worst leaf of each component.
    pub fn worst_per_component(&self) -> Vec<(Component, &LeafReport)> {
        Component::ALL
            .iter()
            .filter_map(|&c| {
                self.leaves
                    .iter()
                    .filter(|(lc, _)| *lc == c)
                    .map(|(_, r)| r)
                    .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
                    .map(|r| (c, r))
            })
            .collect()
    }
}

/// Checks every element of every parameter of the full model on one
/// image-text pair under the prefix mask. `gelu_fault` scales the GeLU
/// backward rule, which must make the check fail.
pub fn check_model(params: &VLMParams, image: &Image, text: &Encoded, h: f64, gelu_fault: Option<f64>) -> Result<ModelReport> {
    let start = Instant::now();
    let batch = collate(&[(0, std::sync::Arc::new(image.clone()), text)], &params.config)?;
    let mut g = Graph::new();
    if let Some(f) = gelu_fault {
        g.inject_gelu_grad_fault(f);
    }
    let mut masks = MaskCache::new();
    let model = BoundModel::bind(&mut g, params, |_| true);
    let loss = micro_batch_loss(&mut g, &model, &batch, MaskKind::ImageBidiTextCausal, None, &mut masks)?;
    g.backward(loss)?;
    let vars = model.vars().to_vec();
    let mut leaves = Vec::with_capacity(vars.len());
    let mut elements = 0;
    for (p, v) in params.params().iter().zip(vars) {
        let report = check_leaf(&mut g, loss, &p.name, v, h, ATOL / RTOL)?;
        elements += report.numel;
        leaves.push((p.component, report));
    }
    Ok(ModelReport {
        leaves,
        elements,
        elapsed: start.elapsed(),
    })
}

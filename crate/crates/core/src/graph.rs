//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op is evaluated eagerly when it is recorded and appended to the
//! tape, so node order is a topological order. `backward` walks the tape
//! once in reverse. The tape can also re-evaluate the part of itself that
//! depends on a perturbed leaf, which is what the finite-difference checker
//! uses to avoid rebuilding a whole model forward for every element.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{all_finite, Tensor};

/// Additive bias marking a forbidden attention entry.
pub const MASK_SENTINEL: f64 = -1e9;

/// Label value excluded from cross-entropy value and gradient.
pub const IGNORE_INDEX: i64 = -100;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a · b`, or `a · bᵀ` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    /// `x[m,n] + bias[n]` broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows { x: Var, bias: Var },
    LayerNorm { x: Var, gain: Var, offset: Var, eps: f64 },
    Gelu(Var),
    CrossEntropy { logits: Var, labels: Rc<[i64]>, ignore: i64 },
    GatherRows { x: Var, rows: Rc<[usize]> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Inputs<'_> {
        use Inputs::Inline;
        match self {
            Op::Leaf => Inline([Var(0); 3], 0),
            Op::MatMul { a, b, .. } => Inline([*a, *b, Var(0)], 2),
            Op::Transpose(x) | Op::Scale(x, _) | Op::Gelu(x) | Op::Sum(x) | Op::Mean(x) => Inline([*x, Var(0), Var(0)], 1),
            Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => Inline([*a, *b, Var(0)], 2),
            Op::SoftmaxRows { x, bias } => Inline([*x, *bias, Var(0)], 2),
            Op::LayerNorm { x, gain, offset, .. } => Inline([*x, *gain, *offset], 3),
            Op::CrossEntropy { logits: x, .. } | Op::GatherRows { x, .. } | Op::SliceCols { x, .. } => {
                Inline([*x, Var(0), Var(0)], 1)
            }
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => Inputs::Slice(xs),
        }
    }
}

/// Input list of an op without a heap allocation for the common arities.
enum Inputs<'a> {
    Inline([Var; 3], usize),
    Slice(&'a [Var]),
}

impl std::ops::Deref for Inputs<'_> {
    type Target = [Var];

    fn deref(&self) -> &[Var] {
        match self {
            Inputs::Inline(vs, n) => &vs[..*n],
            Inputs::Slice(vs) => vs,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    /// Op-specific forward state reused by backward (softmax probabilities,
    /// layer-norm statistics).
    aux: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }

    fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }
}

/// Tape of executed ops for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    gelu_grad_fault: Option<f64>,
    /// Buffers recycled across [`Graph::eval_with_overrides`] calls.
    pool: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every GeLU backward by `factor`. Only used as a negative control
    /// for the gradient checker.
    pub fn inject_gelu_grad_fault(&mut self, factor: f64) {
        self.gelu_grad_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            aux: vec![],
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = false;
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are validated")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::shape("scalar", format!("{:?} is not a scalar", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward target with respect to `v`, if it
    /// received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- op builders --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        self.push(Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", format!("{sa:?} · {sb:?}ᵀ")));
        }
        self.push(Op::MatMul { a, b, trans_b: true })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx[sx.len() - 1] != sb[0] {
            return Err(Error::shape("add_row", format!("{sx:?} + {sb:?}")));
        }
        self.push(Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        self.push(Op::Scale(x, factor))
    }

    /// Row softmax of `x + bias`. `bias` entries are 0 or [`MASK_SENTINEL`]
    /// and never receive a gradient.
    pub fn softmax_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.same_shape("softmax_rows", x, bias)?;
        if self.shape(x).len() != 2 {
            return Err(Error::shape("softmax_rows", format!("{:?}", self.shape(x))));
        }
        self.push(Op::SoftmaxRows { x, bias })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty");
        if self.shape(gain) != [d] || self.shape(offset) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, offset {:?}", self.shape(x), self.shape(gain), self.shape(offset)),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Input(format!("layer_norm eps must be positive, got {eps}")));
        }
        self.push(Op::LayerNorm { x, gain, offset, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    /// Mean negative log-softmax over rows whose label is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore: i64) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let classes = s[1];
        let mut any = false;
        for &l in labels {
            if l == ignore {
                continue;
            }
            if l < 0 || l as usize >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            any = true;
        }
        if !any {
            return Err(Error::AllIgnored);
        }
        self.push(Op::CrossEntropy {
            logits,
            labels: labels.into(),
            ignore,
        })
    }

    /// Rows of a 2-D tensor by index; embedding lookup is the main use.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || rows.is_empty() {
            return Err(Error::shape("gather_rows", format!("{s:?} with {} rows", rows.len())));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::IndexOutOfRange { index: bad, len: s[0] });
        }
        self.push(Op::GatherRows { x, rows: rows.into() })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat_check("concat_rows", xs, |s| s[1])?;
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat_check("concat_cols", xs, |s| s[0])?;
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::shape("slice_cols", format!("{s:?}[.., {start}..{}]", start + len)));
        }
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn concat_check(&self, op: &'static str, xs: &[Var], keep: impl Fn(&[usize]) -> usize) -> Result<usize> {
        let first = xs.first().ok_or_else(|| Error::shape(op, "no inputs"))?;
        if xs.iter().any(|&x| self.shape(x).len() != 2) {
            return Err(Error::shape(op, "inputs must be 2-D"));
        }
        let k = keep(self.shape(*first));
        if xs.iter().any(|&x| keep(self.shape(x)) != k) {
            return Err(Error::shape(op, "mismatched extents"));
        }
        Ok(k)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let nodes = &self.nodes;
        let (shape, value, aux) = eval(&op, nodes, &|v| &nodes[v.0].value)?;
        if !all_finite(&value) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            aux,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- backward -----------------------------------------------------

    /// Populates gradients of `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran; call reset_grads first".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.backprop_node(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        if !self.grads.iter().flatten().all(|g| all_finite(g)) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&contribution).for_each(|(b, c)| *b += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let (m, k) = (na.rows(), na.cols());
                let n = if trans_b { nb.rows() } else { nb.cols() };
                let ga = self.wants(a).then(|| {
                    let mut out = vec![0.0; m * k];
                    if trans_b {
                        // dA = dC · B, B is [n,k]
                        gemm(m, n, k, g, (n, 1), &nb.value, (k, 1), &mut out);
                    } else {
                        // dA = dC · Bᵀ, B is [k,n]
                        gemm(m, n, k, g, (n, 1), &nb.value, (1, n), &mut out);
                    }
                    out
                });
                let gb = self.wants(b).then(|| {
                    if trans_b {
                        // dB = dCᵀ · A, [n,k]
                        let mut out = vec![0.0; n * k];
                        gemm(n, m, k, g, (1, n), &na.value, (k, 1), &mut out);
                        out
                    } else {
                        // dB = Aᵀ · dC, [k,n]
                        let mut out = vec![0.0; k * n];
                        gemm(k, m, n, &na.value, (1, k), g, (n, 1), &mut out);
                        out
                    }
                });
                if let Some(ga) = ga {
                    self.accumulate(a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].rows(), self.nodes[x.0].cols());
                // g is [c, r]
                let mut out = vec![0.0; r * c];
                for (j, grow) in g.chunks(r).enumerate() {
                    for (ii, &v) in grow.iter().enumerate() {
                        out[ii * c + j] = v;
                    }
                }
                self.accumulate(x, out);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(x, g.to_vec());
                if self.wants(bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    self.accumulate(bias, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let gb: Vec<f64> = g.iter().zip(&self.nodes[b.0].value).map(|(g, v)| g * v).collect();
                    self.accumulate(a, gb);
                }
                if self.wants(b) {
                    let ga: Vec<f64> = g.iter().zip(&self.nodes[a.0].value).map(|(g, v)| g * v).collect();
                    self.accumulate(b, ga);
                }
            }
            Op::Scale(x, f) => self.accumulate(x, g.iter().map(|v| v * f).collect()),
            Op::SoftmaxRows { x, .. } => {
                let y = &self.nodes[i].value;
                let n = self.nodes[i].cols();
                let mut out = vec![0.0; y.len()];
                for ((orow, yrow), grow) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(x, out);
            }
            Op::LayerNorm { x, gain, offset, .. } => {
                let d = self.nodes[x.0].cols();
                let xs = &self.nodes[x.0].value;
                let stats = &self.nodes[i].aux;
                let gamma = &self.nodes[gain.0].value;
                let mut gx = vec![0.0; xs.len()];
                let mut ggain = vec![0.0; d];
                let mut goff = vec![0.0; d];
                for (r, (xrow, grow)) in xs.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dxhat = grow[j] * gamma[j];
                        ggain[j] += grow[j] * xhat;
                        goff[j] += grow[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dxhat = grow[j] * gamma[j];
                        gx[r * d + j] = rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gain, ggain);
                self.accumulate(offset, goff);
            }
            Op::Gelu(x) => {
                let fault = self.gelu_grad_fault.unwrap_or(1.0);
                let out = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * gelu_derivative(v) * fault)
                    .collect();
                self.accumulate(x, out);
            }
            Op::CrossEntropy { logits, labels, ignore } => {
                let n = self.nodes[logits.0].cols();
                let probs = &self.nodes[i].aux;
                let count = labels.iter().filter(|&&l| l != ignore).count() as f64;
                let scale = g[0] / count;
                let mut out = vec![0.0; probs.len()];
                for (r, &l) in labels.iter().enumerate() {
                    if l == ignore {
                        continue;
                    }
                    let row = &mut out[r * n..(r + 1) * n];
                    row.iter_mut().zip(&probs[r * n..(r + 1) * n]).for_each(|(o, p)| *o = p * scale);
                    row[l as usize] -= scale;
                }
                self.accumulate(logits, out);
            }
            Op::GatherRows { x, rows } => {
                if self.wants(x) {
                    let c = self.nodes[x.0].cols();
                    let mut out = vec![0.0; self.nodes[x.0].value.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        out[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(o, v)| *o += v);
                    }
                    self.accumulate(x, out);
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = self.nodes[x.0].value.len();
                    self.accumulate(x, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = self.nodes[i].cols();
                let mut start = 0;
                for x in xs {
                    let c = self.nodes[x.0].cols();
                    if self.wants(x) {
                        let part = g.chunks(total).flat_map(|row| &row[start..start + c]).copied().collect();
                        self.accumulate(x, part);
                    }
                    start += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.wants(x) {
                    let c = self.nodes[x.0].cols();
                    let mut out = vec![0.0; self.nodes[x.0].value.len()];
                    for (orow, grow) in out.chunks_mut(c).zip(g.chunks(len)) {
                        orow[start..start + len].copy_from_slice(grow);
                    }
                    self.accumulate(x, out);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(x, vec![g[0] / n as f64; n]);
            }
        }
        Ok(())
    }

    // ---- re-evaluation ------------------------------------------------

    /// Value of scalar node `output` with element `index` of leaf `leaf`
    /// replaced by `value`. The tape is left unchanged.
    pub fn eval_with_override(&mut self, leaf: Var, index: usize, value: f64, output: Var) -> Result<f64> {
        Ok(self.eval_with_overrides(leaf, &[(index, value)], output)?[0])
    }

    /// Scalar `output` under each override `(index, value)` of `leaf`.
    ///
    /// Every override is an independent copy of the forward pass. Only nodes
    /// downstream of the leaf whose inputs actually changed are re-evaluated;
    /// copies share everything else. Matrix products against an unperturbed
    /// right operand run as one stacked product over all copies, and a
    /// perturbed right-hand leaf only recomputes the affected column. The
    /// tape is restored before returning.
    pub fn eval_with_overrides(&mut self, leaf: Var, overrides: &[(usize, f64)], output: Var) -> Result<Vec<f64>> {
        if !matches!(self.nodes[leaf.0].op, Op::Leaf) {
            return Err(Error::Input("override target must be a leaf".into()));
        }
        let len = self.nodes[leaf.0].value.len();
        if let Some(&(index, _)) = overrides.iter().find(|(i, _)| *i >= len) {
            return Err(Error::IndexOutOfRange { index, len });
        }
        if self.nodes[output.0].value.is_empty() {
            return Err(Error::shape("eval_with_overrides", "empty output"));
        }
        let base_out = self.nodes[output.0].value[0];
        if output.0 <= leaf.0 {
            let out = if output == leaf { overrides.iter().map(|o| o.1).collect() } else { vec![base_out; overrides.len()] };
            return Ok(out);
        }
        let mut last_use = vec![0; output.0 + 1];
        for i in leaf.0 + 1..=output.0 {
            for v in self.nodes[i].op.inputs().iter() {
                last_use[v.0] = i;
            }
        }
        // Per dirty node, the values of every copy back to back. The leaf
        // itself is never copied; its consumers poke the override in place.
        let mut copies: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        let mut pool = std::mem::take(&mut self.pool);
        for i in leaf.0 + 1..=output.0 {
            let node = &self.nodes[i];
            let inputs = node.op.inputs();
            let reads_leaf = inputs.contains(&leaf);
            if !reads_leaf && !inputs.iter().any(|v| copies[v.0].is_some()) {
                continue;
            }
            let outs = if reads_leaf {
                self.eval_leaf_consumer(i, leaf, overrides, &copies, &mut pool)?
            } else {
                self.eval_copies(i, overrides.len(), &copies, &mut pool)?
            };
            let node = &self.nodes[i];
            if !all_finite(&outs) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            let changed = outs
                .chunks_exact(node.value.len())
                .any(|o| o.iter().zip(&node.value).any(|(a, b)| a.to_bits() != b.to_bits()));
            if changed {
                copies[i] = Some(outs);
            } else {
                pool.push(outs);
            }
            for v in node.op.inputs().iter() {
                if last_use[v.0] == i && v.0 != output.0 {
                    if let Some(buf) = copies[v.0].take() {
                        pool.push(buf);
                    }
                }
            }
        }
        let out = match &copies[output.0] {
            Some(cs) => cs.clone(),
            None => vec![base_out; overrides.len()],
        };
        pool.extend(copies.into_iter().flatten());
        self.pool = pool;
        Ok(out)
    }

    /// Copies of node `i`, some of whose inputs have per-copy values.
    fn eval_copies(&self, i: usize, n_copies: usize, copies: &[Option<Vec<f64>>], pool: &mut Vec<Vec<f64>>) -> Result<Vec<f64>> {
        let node = &self.nodes[i];
        let clean = |v: &Var| copies[v.0].is_none();
        // Stacked values of a dirty input, or the shared value of a clean one.
        let all = |v: &Var| -> &[f64] { copies[v.0].as_deref().unwrap_or(&self.nodes[v.0].value) };
        let mut out = take_buffer(pool, n_copies * node.value.len());
        match &node.op {
            Op::MatMul { a, b, trans_b } => {
                let k = self.nodes[a.0].cols();
                let n = node.cols();
                let sb = if *trans_b { (1, k) } else { (n, 1) };
                if clean(b) {
                    // one product over the copies stacked as rows
                    let stacked = all(a);
                    let m = stacked.len() / k;
                    out.resize(m * n, 0.0);
                    gemm(m, k, n, stacked, (k, 1), &self.nodes[b.0].value, sb, &mut out);
                } else {
                    let per = node.value.len();
                    out.resize(n_copies * per, 0.0);
                    for (c, o) in out.chunks_exact_mut(per).enumerate() {
                        let av = copy_value(&self.nodes, copies, a, c);
                        let bv = copy_value(&self.nodes, copies, b, c);
                        gemm(per / n, k, n, av, (k, 1), bv, sb, o);
                    }
                }
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let add = matches!(node.op, Op::Add(..));
                for c in 0..n_copies {
                    let av = copy_value(&self.nodes, copies, a, c);
                    let bv = copy_value(&self.nodes, copies, b, c);
                    if add {
                        out.extend(av.iter().zip(bv).map(|(x, y)| x + y));
                    } else {
                        out.extend(av.iter().zip(bv).map(|(x, y)| x * y));
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let cols = self.nodes[x.0].cols();
                for c in 0..n_copies {
                    let xv = copy_value(&self.nodes, copies, x, c);
                    for &r in rows.iter() {
                        out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                for c in 0..n_copies {
                    for x in xs {
                        out.extend_from_slice(copy_value(&self.nodes, copies, x, c));
                    }
                }
            }
            Op::ConcatCols(xs) => {
                for c in 0..n_copies {
                    for row in 0..node.rows() {
                        for x in xs {
                            let cols = self.nodes[x.0].cols();
                            out.extend_from_slice(&copy_value(&self.nodes, copies, x, c)[row * cols..(row + 1) * cols]);
                        }
                    }
                }
            }
            Op::Gelu(x) => gelu_into(all(x), &mut out),
            Op::Scale(x, f) => out.extend(all(x).iter().map(|v| v * f)),
            Op::AddRow(x, bias) if clean(bias) => add_row_into(all(x), all(bias), &mut out),
            Op::LayerNorm { x, gain, offset, eps } if clean(gain) && clean(offset) => {
                layer_norm_into(all(x), node.cols(), all(gain), all(offset), *eps, &mut out, None)
            }
            Op::SoftmaxRows { x, bias } if clean(bias) => softmax_rows_into(all(x), all(bias), node.cols(), &mut out)?,
            Op::SliceCols { x, start, len } => slice_cols_into(all(x), self.nodes[x.0].cols(), *start, *len, &mut out),
            Op::CrossEntropy { logits, labels, ignore } => {
                let n = self.nodes[logits.0].cols();
                for c in 0..n_copies {
                    let l = copy_value(&self.nodes, copies, logits, c);
                    out.push(cross_entropy_rows(l, n, labels, *ignore, None));
                }
            }
            op => {
                for c in 0..n_copies {
                    let val = |v: &Var| -> &[f64] { copy_value(&self.nodes, copies, v, c) };
                    out.extend_from_slice(&eval(op, &self.nodes, &val)?.1);
                }
            }
        }
        Ok(out)
    }

    /// Copies of node `i`, which reads `leaf` directly.
    fn eval_leaf_consumer(
        &mut self,
        i: usize,
        leaf: Var,
        overrides: &[(usize, f64)],
        copies: &[Option<Vec<f64>>],
        pool: &mut Vec<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if let Op::MatMul { a, b, trans_b: false } = self.nodes[i].op {
            if b == leaf && a != leaf && copies[a.0].is_none() {
                // Perturbing b[p, j] only moves column j of a·b.
                let (na, nb, node) = (&self.nodes[a.0], &self.nodes[b.0], &self.nodes[i]);
                let (k, n) = (na.cols(), node.cols());
                let mut outs = take_buffer(pool, overrides.len() * node.value.len());
                for &(index, value) in overrides {
                    let (p, j) = (index / n, index % n);
                    let start = outs.len();
                    outs.extend_from_slice(&node.value);
                    let out = &mut outs[start..];
                    for (r, arow) in na.value.chunks(k).enumerate() {
                        let mut acc = 0.0;
                        for (q, &x) in arow.iter().enumerate() {
                            acc += x * if q == p { value } else { nb.value[q * n + j] };
                        }
                        out[r * n + j] = acc;
                    }
                }
                return Ok(outs);
            }
        }
        let mut outs = take_buffer(pool, overrides.len() * self.nodes[i].value.len());
        for (c, &(index, value)) in overrides.iter().enumerate() {
            let old = std::mem::replace(&mut self.nodes[leaf.0].value[index], value);
            let nodes = &self.nodes;
            let val = |v: &Var| -> &[f64] { copy_value(nodes, copies, v, c) };
            let result = eval(&nodes[i].op, nodes, &val);
            self.nodes[leaf.0].value[index] = old;
            outs.extend_from_slice(&result?.1);
        }
        Ok(outs)
    }
}

/// An empty buffer with room for `len` values, reused from `pool` when one
/// is large enough.
fn take_buffer(pool: &mut Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    match pool.iter().rposition(|b| b.capacity() >= len) {
        Some(i) => {
            let mut b = pool.swap_remove(i);
            b.clear();
            b
        }
        None => Vec::with_capacity(len),
    }
}

/// Appends `x + bias` with `bias` added to every row.
fn add_row_into(x: &[f64], bias: &[f64], out: &mut Vec<f64>) {
    let start = out.len();
    out.extend_from_slice(x);
    for row in out[start..].chunks_exact_mut(bias.len()) {
        for (v, w) in row.iter_mut().zip(bias) {
            *v += w;
        }
    }
}

fn gelu_into(x: &[f64], out: &mut Vec<f64>) {
    out.extend(x.iter().map(|&v| gelu_scalar(v)));
}

fn slice_cols_into(x: &[f64], cols: usize, start: usize, len: usize, out: &mut Vec<f64>) {
    for row in x.chunks_exact(cols) {
        out.extend_from_slice(&row[start..start + len]);
    }
}

/// Appends the row softmax of `x + bias`. `x` may hold several stacked
/// copies of the `bias` shape; the bias rows repeat for each.
fn softmax_rows_into(x: &[f64], bias: &[f64], n: usize, out: &mut Vec<f64>) -> Result<()> {
    let start = out.len();
    out.resize(start + x.len(), 0.0);
    let bias_rows = bias.len() / n;
    for (r, (orow, xrow)) in out[start..].chunks_exact_mut(n).zip(x.chunks_exact(n)).enumerate() {
        let br = r % bias_rows;
        let brow = &bias[br * n..(br + 1) * n];
        if brow.iter().all(|&b| b <= MASK_SENTINEL * 0.5) {
            return Err(Error::FullyMaskedRow { row: br });
        }
        let mut max = f64::NEG_INFINITY;
        for (o, (&xv, &bv)) in orow.iter_mut().zip(xrow.iter().zip(brow)) {
            *o = xv + bv;
            max = max.max(*o);
        }
        let mut sum = 0.0;
        for o in orow.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(())
}

/// Appends the layer norm of each `d`-wide row; `stats` receives
/// `(mean, 1/std)` per row.
fn layer_norm_into(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut Vec<f64>,
    mut stats: Option<&mut Vec<f64>>,
) {
    for xrow in x.chunks_exact(d) {
        let mean = xrow.iter().sum::<f64>() / d as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        out.extend((0..d).map(|j| (xrow[j] - mean) * rstd * gamma[j] + beta[j]));
        if let Some(s) = stats.as_deref_mut() {
            s.push(mean);
            s.push(rstd);
        }
    }
}

/// Mean cross-entropy over the rows whose label is not `ignore`, filling
/// `probs` with the row softmax when given.
fn cross_entropy_rows(logits: &[f64], n: usize, labels: &[i64], ignore: i64, mut probs: Option<&mut [f64]>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, lrow) in logits.chunks_exact(n).enumerate() {
        let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = match probs.as_deref_mut() {
            Some(p) => {
                let prow = &mut p[r * n..(r + 1) * n];
                let mut sum = 0.0;
                for (p, &l) in prow.iter_mut().zip(lrow) {
                    *p = (l - max).exp();
                    sum += *p;
                }
                prow.iter_mut().for_each(|p| *p /= sum);
                sum
            }
            None => lrow.iter().map(|&l| (l - max).exp()).sum(),
        };
        let label = labels[r];
        if label != ignore {
            total += sum.ln() + max - lrow[label as usize];
            count += 1;
        }
    }
    total / count as f64
}

/// Value of `v` in copy `c`: its own slice when dirty, else the tape's.
fn copy_value<'a>(nodes: &'a [Node], copies: &'a [Option<Vec<f64>>], v: &Var, c: usize) -> &'a [f64] {
    let len = nodes[v.0].value.len();
    match &copies[v.0] {
        Some(cs) => &cs[c * len..(c + 1) * len],
        None => &nodes[v.0].value,
    }
}

// ---- kernels ----------------------------------------------------------

/// `c[m,n] = a[m,k] · b[k,n]` with arbitrary strides on `a` and `b`;
/// `c` is dense row-major and overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: strides describe in-bounds views of `a` ([m,k]) and `b`
    // ([k,n]); `c` holds exactly m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `½x(1 + tanh u)` written as `x·σ(2u)`, which needs one `exp` instead of
/// a `tanh` call and is several times faster.
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x / (1.0 + (-2.0 * inner).exp())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * inner).exp());
    // 1 + tanh u = 2s and 1 - tanh² u = 4s(1 - s)
    s + 2.0 * x * s * (1.0 - s) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

type Evaluated = (Vec<usize>, Vec<f64>, Vec<f64>);

/// Evaluates `op` reading input values through `val`, which lets
/// perturbed copies stand in for the stored values.
fn eval<'a>(op: &Op, nodes: &'a [Node], val: &dyn Fn(&Var) -> &'a [f64]) -> Result<Evaluated> {
    let node = |v: &Var| &nodes[v.0];
    Ok(match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::MatMul { a, b, trans_b } => {
            let (na, nb) = (node(a), node(b));
            let (m, k) = (na.rows(), na.cols());
            let n = if *trans_b { nb.rows() } else { nb.cols() };
            let mut out = vec![0.0; m * n];
            let sb = if *trans_b { (1, k) } else { (n, 1) };
            gemm(m, k, n, val(a), (k, 1), val(b), sb, &mut out);
            (vec![m, n], out, vec![])
        }
        Op::Transpose(x) => {
            let nx = node(x);
            let (r, c) = (nx.rows(), nx.cols());
            let mut out = vec![0.0; r * c];
            for (ii, row) in val(x).chunks(c).enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    out[j * r + ii] = v;
                }
            }
            (vec![c, r], out, vec![])
        }
        Op::Add(a, b) => (
            node(a).shape.clone(),
            val(a).iter().zip(val(b)).map(|(x, y)| x + y).collect(),
            vec![],
        ),
        Op::Mul(a, b) => (
            node(a).shape.clone(),
            val(a).iter().zip(val(b)).map(|(x, y)| x * y).collect(),
            vec![],
        ),
        Op::AddRow(x, bias) => {
            let mut out = Vec::with_capacity(val(x).len());
            add_row_into(val(x), val(bias), &mut out);
            (node(x).shape.clone(), out, vec![])
        }
        Op::Scale(x, f) => (node(x).shape.clone(), val(x).iter().map(|v| v * f).collect(), vec![]),
        Op::SoftmaxRows { x, bias } => {
            let mut out = Vec::with_capacity(val(x).len());
            softmax_rows_into(val(x), val(bias), node(x).cols(), &mut out)?;
            (node(x).shape.clone(), out, vec![])
        }
        Op::LayerNorm { x, gain, offset, eps } => {
            let nx = node(x);
            let mut out = Vec::with_capacity(nx.value.len());
            let mut stats = Vec::with_capacity(2 * nx.rows());
            layer_norm_into(val(x), nx.cols(), val(gain), val(offset), *eps, &mut out, Some(&mut stats));
            (nx.shape.clone(), out, stats)
        }
        Op::Gelu(x) => {
            let mut out = Vec::with_capacity(val(x).len());
            gelu_into(val(x), &mut out);
            (node(x).shape.clone(), out, vec![])
        }
        Op::CrossEntropy { logits, labels, ignore } => {
            let mut probs = vec![0.0; val(logits).len()];
            let loss = cross_entropy_rows(val(logits), node(logits).cols(), labels, *ignore, Some(&mut probs));
            (vec![1], vec![loss], probs)
        }
        Op::GatherRows { x, rows } => {
            let nx = node(x);
            let c = nx.cols();
            let xv = val(x);
            let mut out = Vec::with_capacity(rows.len() * c);
            for &r in rows.iter() {
                out.extend_from_slice(&xv[r * c..(r + 1) * c]);
            }
            (vec![rows.len(), c], out, vec![])
        }
        Op::ConcatRows(xs) => {
            let c = node(&xs[0]).cols();
            let out: Vec<f64> = xs.iter().map(|x| val(x)).collect::<Vec<_>>().concat();
            (vec![out.len() / c, c], out, vec![])
        }
        Op::ConcatCols(xs) => {
            let r = node(&xs[0]).rows();
            let total: usize = xs.iter().map(|x| node(x).cols()).sum();
            let mut out = Vec::with_capacity(r * total);
            for row in 0..r {
                for x in xs {
                    let nx = node(x);
                    let c = nx.cols();
                    out.extend_from_slice(&val(x)[row * c..(row + 1) * c]);
                }
            }
            (vec![r, total], out, vec![])
        }
        Op::SliceCols { x, start, len } => {
            let nx = node(x);
            let mut out = Vec::with_capacity(nx.rows() * len);
            slice_cols_into(val(x), nx.cols(), *start, *len, &mut out);
            (vec![nx.rows(), *len], out, vec![])
        }
        Op::Sum(x) => (vec![1], vec![val(x).iter().sum()], vec![]),
        Op::Mean(x) => {
            let v = val(x);
            (vec![1], vec![v.iter().sum::<f64>() / v.len() as f64], vec![])
        }
    })
}

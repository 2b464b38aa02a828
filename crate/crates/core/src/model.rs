//! Multilayer perceptron `f(g(x))` with hand-written backpropagation.
//!
//! `g` is a stack of affine layers with elementwise activations producing the
//! embedding; `f` is a single affine layer followed by a softmax. Everything
//! runs in `f64` and every reduction is done in a fixed index order, so a
//! forward/backward pass is reproducible bit for bit.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::losses::{LabelLoss, LossWeights};
use crate::rng::{self, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation {other:?}"))),
        }
    }
}

/// Affine map `x W^T + b` followed by an activation; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs), activation }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn activate(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.activation {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub embedding: usize,
    pub classes: usize,
}

impl MlpDims {
    /// `d -> 32 -> 32 -> 16` feature extractor and a `16 -> K` classifier.
    pub fn toy(input: usize, classes: usize) -> Self {
        Self { input, hidden: vec![32, 32], embedding: 16, classes }
    }

    fn feature_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.embedding);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub dims: MlpDims,
    pub feature_layers: Vec<Layer>,
    /// Linear layer producing logits; softmax is applied on top.
    pub classifier: Layer,
}

impl MlpParams {
    /// All-zero parameters with ReLU feature layers.
    pub fn zeros(dims: MlpDims) -> Self {
        let widths = dims.feature_widths();
        let feature_layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1], Activation::Relu)).collect();
        let classifier = Layer::zeros(dims.embedding, dims.classes, Activation::Identity);
        Self { dims, feature_layers, classifier }
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) and zero biases.
    pub fn init(dims: MlpDims, seed: u64) -> Self {
        let mut rng = rng::stream(seed, streams::INIT);
        let mut p = Self::zeros(dims);
        for layer in p.feature_layers.iter_mut().chain(std::iter::once(&mut p.classifier)) {
            let bound = (6.0 / layer.inputs() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            layer.weight.mapv_inplace(|_| dist.sample(&mut rng));
        }
        p
    }

    /// Assemble parameters from explicit layers, checking the shapes chain.
    pub fn from_layers(input: usize, feature_layers: Vec<Layer>, classifier: Layer) -> Result<Self> {
        let mut width = input;
        for (i, l) in feature_layers.iter().chain(std::iter::once(&classifier)).enumerate() {
            if l.inputs() != width || l.bias.len() != l.outputs() {
                return Err(Error::DimensionMismatch(format!("layer {i} does not accept width {width}")));
            }
            width = l.outputs();
        }
        let embedding = feature_layers.last().map_or(input, Layer::outputs);
        let hidden = feature_layers.iter().rev().skip(1).rev().map(Layer::outputs).collect();
        let dims = MlpDims { input, hidden, embedding, classes: classifier.outputs() };
        let p = Self { dims, feature_layers, classifier };
        if p.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(p)
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.feature_layers.iter().chain(std::iter::once(&self.classifier))
    }

    /// Parameter tensors in a fixed order: weight, bias per layer, classifier last.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice().expect("standard layout"), l.bias.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| {
                [l.weight.as_slice_mut().expect("standard layout"), l.bias.as_slice_mut().expect("standard layout")]
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Gradients laid out like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// `(weight, bias)` per feature layer.
    pub feature_layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub classifier: (Array2<f64>, Array1<f64>),
}

impl GradientSet {
    pub fn zeros_like(p: &MlpParams) -> Self {
        let z = |l: &Layer| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len()));
        Self { feature_layers: p.feature_layers.iter().map(z).collect(), classifier: z(&p.classifier) }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.feature_layers
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_matches(&self, p: &MlpParams) -> Result<()> {
        let ok = self.tensors().iter().zip(p.tensors()).all(|(g, t)| g.len() == t.len())
            && self.feature_layers.len() == p.feature_layers.len();
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("gradient shapes do not match parameters".into()))
        }
    }
}

fn check_input(x: ArrayView2<f64>, width: usize, what: &str) -> Result<()> {
    if x.ncols() != width {
        return Err(Error::DimensionMismatch(format!("{what} has {} columns, expected {width}", x.ncols())));
    }
    Ok(())
}

/// Activations of every feature layer, input first.
struct FeatureTrace {
    activations: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl FeatureTrace {
    fn embedding(&self) -> &Array2<f64> {
        self.activations.last().expect("input is always recorded")
    }
}

fn trace_features(p: &MlpParams, x: ArrayView2<f64>) -> FeatureTrace {
    let mut activations = vec![x.to_owned()];
    let mut pre = Vec::with_capacity(p.feature_layers.len());
    for layer in &p.feature_layers {
        let z = layer.affine(activations.last().expect("nonempty").view());
        activations.push(layer.activate(&z));
        pre.push(z);
    }
    FeatureTrace { activations, pre }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

/// Embeddings `g(X)`.
pub fn forward_features(p: &MlpParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(x, p.dims.input, "input batch")?;
    Ok(trace_features(p, x).activations.pop().expect("nonempty"))
}

/// Class probabilities `softmax(f(E))`.
pub fn forward_classifier(p: &MlpParams, e: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(e, p.dims.embedding, "embedding batch")?;
    Ok(softmax_rows(p.classifier.affine(e)))
}

pub fn predict_proba(p: &MlpParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let e = forward_features(p, x)?;
    forward_classifier(p, e.view())
}

/// Backpropagate `d_out` (gradient w.r.t. the embedding) through the feature layers.
fn backprop_features(p: &MlpParams, trace: &FeatureTrace, mut d_out: Array2<f64>, grads: &mut GradientSet) {
    for (l, layer) in p.feature_layers.iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            ndarray::Zip::from(&mut d_out).and(&trace.pre[l]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let (gw, gb) = &mut grads.feature_layers[l];
        *gw += &d_out.t().dot(&trace.activations[l]);
        *gb += &d_out.sum_axis(Axis(0));
        if l > 0 {
            d_out = d_out.dot(&layer.weight);
        }
    }
}

/// Backpropagate `d_prob` (gradient w.r.t. the softmax output) through the
/// classifier, returning the gradient w.r.t. the embedding.
fn backprop_classifier(
    p: &MlpParams,
    e: &Array2<f64>,
    prob: &Array2<f64>,
    d_prob: &Array2<f64>,
    grads: &mut GradientSet,
) -> Array2<f64> {
    let mut d_logit = Array2::zeros(prob.raw_dim());
    for ((mut dz, pr), dp) in d_logit.rows_mut().into_iter().zip(prob.rows()).zip(d_prob.rows()) {
        let inner: f64 = pr.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        for k in 0..pr.len() {
            dz[k] = pr[k] * (dp[k] - inner);
        }
    }
    let (gw, gb) = &mut grads.classifier;
    *gw += &d_logit.t().dot(e);
    *gb += &d_logit.sum_axis(Axis(0));
    d_logit.dot(&p.classifier.weight)
}

/// Batches entering the composite objective.
#[derive(Debug, Clone, Copy)]
pub struct CompositeBatch<'a> {
    /// Raw source inputs and their one-hot labels (supervised term).
    pub src_raw_x: ArrayView2<'a, f64>,
    pub src_raw_y: ArrayView2<'a, f64>,
    /// Source inputs and label vectors entering the transfer term.
    pub src_x: ArrayView2<'a, f64>,
    pub src_y: ArrayView2<'a, f64>,
    /// Target inputs entering the transfer term.
    pub tgt_x: ArrayView2<'a, f64>,
    /// Transport plan between `src_x` rows and `tgt_x` rows, held fixed.
    pub plan: ArrayView2<'a, f64>,
}

/// Loss terms reported alongside the gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    pub source_ce: f64,
    /// `sum_ij pi_ij C_ij` before scaling by `eta3`.
    pub transfer: f64,
}

/// Mean source cross-entropy plus `eta3 * sum_ij pi_ij [eta1 ||g(x_i) - g(z_j)||^2 + eta2 L(y_i, f(g(z_j)))]`.
///
/// The plan is a constant; gradients flow through `g` and `f` only. With
/// `eta3 == 0` the transfer branch is skipped entirely.
pub fn composite_loss_and_grads(
    p: &MlpParams,
    batch: &CompositeBatch<'_>,
    w: &LossWeights,
    label_loss: LabelLoss,
    eta3: f64,
) -> Result<(CompositeLoss, GradientSet)> {
    let CompositeBatch { src_raw_x, src_raw_y, src_x, src_y, tgt_x, plan } = *batch;
    check_input(src_raw_x, p.dims.input, "raw source batch")?;
    check_input(src_raw_y, p.dims.classes, "raw source labels")?;
    if src_raw_x.nrows() != src_raw_y.nrows() || src_raw_x.nrows() == 0 {
        return Err(Error::DimensionMismatch("raw source inputs and labels differ in length".into()));
    }
    let mut grads = GradientSet::zeros_like(p);

    // Supervised term on raw source samples.
    let n = src_raw_x.nrows() as f64;
    let trace = trace_features(p, src_raw_x);
    let e = trace.embedding();
    let prob = softmax_rows(p.classifier.affine(e.view()));
    let mut source_ce = 0.0;
    let mut d_prob = Array2::zeros(prob.raw_dim());
    for i in 0..prob.nrows() {
        let (y, pr) = (src_raw_y.row(i), prob.row(i));
        source_ce += LabelLoss::Ce.value(y, pr, w);
        let mut out = vec![0.0; pr.len()];
        LabelLoss::Ce.grad_pred(y, pr, w, 1.0 / n, &mut out);
        d_prob.row_mut(i).assign(&Array1::from(out));
    }
    source_ce /= n;
    let d_e = backprop_classifier(p, e, &prob, &d_prob, &mut grads);
    backprop_features(p, &trace, d_e, &mut grads);

    let mut transfer = 0.0;
    if eta3 != 0.0 {
        check_input(src_x, p.dims.input, "source batch")?;
        check_input(src_y, p.dims.classes, "source labels")?;
        check_input(tgt_x, p.dims.input, "target batch")?;
        if plan.dim() != (src_x.nrows(), tgt_x.nrows()) || src_y.nrows() != src_x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "plan {:?} vs batches {} x {}",
                plan.dim(),
                src_x.nrows(),
                tgt_x.nrows()
            )));
        }
        let ts = trace_features(p, src_x);
        let tt = trace_features(p, tgt_x);
        let (es, et) = (ts.embedding(), tt.embedding());
        let pt = softmax_rows(p.classifier.affine(et.view()));
        let mut d_es = Array2::zeros(es.raw_dim());
        let mut d_et = Array2::zeros(et.raw_dim());
        let mut d_pt = Array2::<f64>::zeros(pt.raw_dim());
        let mut scratch = vec![0.0; p.dims.classes];
        for i in 0..plan.nrows() {
            for j in 0..plan.ncols() {
                let pij = plan[[i, j]];
                if pij == 0.0 {
                    continue;
                }
                let mut c = 0.0;
                if w.eta1 != 0.0 {
                    let coef = eta3 * pij * w.eta1 * 2.0;
                    for k in 0..es.ncols() {
                        let diff = es[[i, k]] - et[[j, k]];
                        c += w.eta1 * diff * diff;
                        d_es[[i, k]] += coef * diff;
                        d_et[[j, k]] -= coef * diff;
                    }
                }
                if w.eta2 != 0.0 {
                    c += w.eta2 * label_loss.value(src_y.row(i), pt.row(j), w);
                    scratch.iter_mut().for_each(|v| *v = 0.0);
                    label_loss.grad_pred(src_y.row(i), pt.row(j), w, eta3 * pij * w.eta2, &mut scratch);
                    for (d, s) in d_pt.row_mut(j).iter_mut().zip(&scratch) {
                        *d += s;
                    }
                }
                transfer += pij * c;
            }
        }
        let d_from_pred = backprop_classifier(p, et, &pt, &d_pt, &mut grads);
        backprop_features(p, &ts, d_es, &mut grads);
        backprop_features(p, &tt, d_et + d_from_pred, &mut grads);
    }

    let total = source_ce + eta3 * transfer;
    if !total.is_finite() {
        return Err(Error::NonFinite("composite loss".into()));
    }
    Ok((CompositeLoss { total, source_ce, transfer }, grads))
}

/// Worst relative error between `grad` and central differences of `f` at `theta`.
///
/// Each denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check_flat(theta: &[f64], mut f: impl FnMut(&[f64]) -> f64, grad: &[f64], h: f64) -> f64 {
    let mut x = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

/// [`finite_difference_check_flat`] over every parameter of `p`.
pub fn finite_difference_check(
    p: &MlpParams,
    mut loss: impl FnMut(&MlpParams) -> Result<f64>,
    grads: &GradientSet,
    h: f64,
) -> Result<f64> {
    grads.check_matches(p)?;
    let theta: Vec<f64> = p.tensors().concat();
    let mut probe = p.clone();
    let mut failure = None;
    let err = finite_difference_check_flat(
        &theta,
        |x| {
            set_flat(&mut probe, x);
            loss(&probe).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &grads.flat(),
        h,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

fn set_flat(p: &mut MlpParams, x: &[f64]) {
    let mut offset = 0;
    for t in p.tensors_mut() {
        t.copy_from_slice(&x[offset..offset + t.len()]);
        offset += t.len();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// First-moment (or momentum) buffers, one per parameter tensor.
    pub first: Vec<Vec<f64>>,
    /// Second-moment buffers (Adam only; empty otherwise).
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(p: &MlpParams, kind: OptimizerKind, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = if matches!(kind, OptimizerKind::Adam { .. }) { zeros.clone() } else { Vec::new() };
        Self { kind, learning_rate, first: zeros, second, step: 0 }
    }

    pub fn adam(p: &MlpParams) -> Self {
        Self::new(p, OptimizerKind::adam(), DEFAULT_LEARNING_RATE)
    }
}

/// One SGD-with-momentum or bias-corrected Adam update, in place.
pub fn optimizer_step(p: &mut MlpParams, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    grads.check_matches(p)?;
    if state.first.len() != grads.tensors().len()
        || state.first.iter().zip(grads.tensors()).any(|(b, g)| b.len() != g.len())
    {
        return Err(Error::DimensionMismatch("optimizer buffers do not match parameters".into()));
    }
    state.step += 1;
    let lr = state.learning_rate;
    let gs = grads.tensors();
    match state.kind {
        OptimizerKind::Sgd { momentum } => {
            for ((t, g), buf) in p.tensors_mut().into_iter().zip(&gs).zip(&mut state.first) {
                for ((x, &gi), b) in t.iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
                    *b = momentum * *b + gi;
                    *x -= lr * *b;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(state.step as i32);
            let c2 = 1.0 - beta2.powi(state.step as i32);
            for (((t, g), m), v) in p.tensors_mut().into_iter().zip(&gs).zip(&mut state.first).zip(&mut state.second) {
                for (((x, &gi), mi), vi) in t.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Header line of the text checkpoint format.
pub const CHECKPOINT_HEADER: &str = "otda-mlp-checkpoint v1";

/// Write `p` in the text checkpoint format (see the README for the layout).
pub fn save_checkpoint<W: Write>(p: &MlpParams, mut out: W) -> std::io::Result<()> {
    let hidden: Vec<String> = p.dims.hidden.iter().map(usize::to_string).collect();
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(
        out,
        "dims input={} hidden={} embedding={} classes={} layers={}",
        p.dims.input,
        if hidden.is_empty() { "-".to_string() } else { hidden.join(",") },
        p.dims.embedding,
        p.dims.classes,
        p.feature_layers.len() + 1
    )?;
    for (i, layer) in p.layers().enumerate() {
        writeln!(out, "layer {i} {} {} {}", layer.activation.name(), layer.outputs(), layer.inputs())?;
        for row in layer.weight.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", cells.join(" "))?;
        }
        let cells: Vec<String> = layer.bias.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", cells.join(" "))?;
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(input: R) -> Result<MlpParams> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = input.lines().map(|l| l.map_err(|e| Error::Checkpoint(e.to_string())));
    let mut next = move || lines.next().unwrap_or_else(|| Err(Error::Checkpoint("unexpected end of file".into())));
    let header = next()?;
    if header.trim() != CHECKPOINT_HEADER {
        return Err(bad(format!("unsupported header {header:?}")));
    }
    let dims_line = next()?;
    let mut fields = std::collections::HashMap::new();
    for tok in dims_line.split_whitespace().skip(1) {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("malformed dims field {tok:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| bad(format!("dims block misses {k}")))?
            .parse()
            .map_err(|_| bad(format!("dims field {k} is not an integer")))
    };
    let count = get("layers")?;
    let input = get("input")?;
    let parse_row = |line: &str, len: usize| -> Result<Vec<f64>> {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != len {
            return Err(bad(format!("expected {len} values, found {}", row.len())));
        }
        Ok(row)
    };
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let head = next()?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "layer" || parts[1] != i.to_string() {
            return Err(bad(format!("expected header of layer {i}, found {head:?}")));
        }
        let activation = Activation::parse(parts[2])?;
        let (rows, cols): (usize, usize) = (
            parts[3].parse().map_err(|_| bad("bad row count".into()))?,
            parts[4].parse().map_err(|_| bad("bad column count".into()))?,
        );
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            values.extend(parse_row(&next()?, cols)?);
        }
        let weight = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
        let bias = Array1::from(parse_row(&next()?, rows)?);
        layers.push(Layer { weight, bias, activation });
    }
    let classifier = layers.pop().ok_or_else(|| bad("checkpoint has no layers".into()))?;
    let p = MlpParams::from_layers(input, layers, classifier).map_err(|e| bad(e.to_string()))?;
    if p.dims.embedding != get("embedding")? || p.dims.classes != get("classes")? {
        return Err(bad("dims block disagrees with the layer shapes".into()));
    }
    Ok(p)
}

/// Draw a random batch of inputs in `[-1, 1]^d` (test and check helper).
pub fn random_inputs<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..=1.0))
}

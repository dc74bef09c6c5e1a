//! The adaptation model and its losses.
//!
//! The model is `probs = softmax(V · act(W x + b) + c)`: a trainable linear
//! extractor `(W, b)` followed by a classifier `(V, c)` that is frozen once
//! source training ends. Gradients are written out by hand; the classifier
//! never receives any during adaptation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix, SeededRng};

/// Lower clamp applied inside every `log`.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Linear classifier head. Only source training may change it.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    weights: Matrix,
    bias: Vec<f64>,
}

impl Classifier {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLinearModel {
    /// `d × D`.
    pub extractor_weights: Matrix,
    /// Length `d`.
    pub extractor_bias: Vec<f64>,
    pub activation: Activation,
    classifier: Classifier,
}

impl SoftmaxLinearModel {
    pub fn new(
        extractor_weights: Matrix,
        extractor_bias: Vec<f64>,
        classifier_weights: Matrix,
        classifier_bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let d = extractor_weights.rows();
        if extractor_bias.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: extractor_bias.len() });
        }
        if classifier_weights.cols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: classifier_weights.cols() });
        }
        if classifier_bias.len() != classifier_weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: classifier_weights.rows(),
                got: classifier_bias.len(),
            });
        }
        Ok(Self {
            extractor_weights,
            extractor_bias,
            activation,
            classifier: Classifier {
                weights: classifier_weights,
                bias: classifier_bias,
            },
        })
    }

    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    pub fn init(input_dim: usize, feature_dim: usize, num_classes: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let mut draw = |rows: usize, cols: usize| {
            let std = 1.0 / (cols.max(1) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
            Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
        };
        let w = draw(feature_dim, input_dim);
        let v = draw(num_classes, feature_dim);
        Self {
            extractor_weights: w,
            extractor_bias: vec![0.0; feature_dim],
            activation,
            classifier: Classifier {
                weights: v,
                bias: vec![0.0; num_classes],
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor_weights.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor_weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weights.rows()
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub(crate) fn classifier_mut(&mut self) -> &mut Classifier {
        &mut self.classifier
    }
}

impl Classifier {
    pub(crate) fn params_mut(&mut self) -> (&mut Matrix, &mut Vec<f64>) {
        (&mut self.weights, &mut self.bias)
    }
}

struct ForwardCache {
    features: Matrix,
    probs: Matrix,
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let row = out.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = crate::numerics::dot(xi, w.row(j)) + b[j];
        }
    }
    out
}

fn forward_cache(model: &SoftmaxLinearModel, x: &Matrix) -> Result<ForwardCache> {
    if x.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.cols(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut features = affine(x, &model.extractor_weights, &model.extractor_bias);
    let act = model.activation;
    for i in 0..features.rows() {
        features.row_mut(i).iter_mut().for_each(|v| *v = act.apply(*v));
    }
    let logits = affine(&features, &model.classifier.weights, &model.classifier.bias);
    let probs = softmax_rows(&logits)?;
    Ok(ForwardCache { features, probs })
}

/// Features `act(x Wᵀ + b)` (`B × d`) and class probabilities (`B × K`).
pub fn forward(model: &SoftmaxLinearModel, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let c = forward_cache(model, x)?;
    Ok((c.features, c.probs))
}

/// Classifier logits for raw inputs.
pub fn logits(model: &SoftmaxLinearModel, x: &Matrix) -> Result<Matrix> {
    let (features, _) = forward(model, x)?;
    Ok(affine(&features, &model.classifier.weights, &model.classifier.bias))
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::DimensionMismatch {
            expected: probs.rows(),
            got: labels.len(),
        });
    }
    if probs.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let k = probs.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: k });
    }
    Ok(())
}

fn check_soft(probs: &Matrix, soft: &Matrix) -> Result<()> {
    if soft.shape() != probs.shape() {
        return Err(Error::DimensionMismatch {
            expected: probs.rows() * probs.cols(),
            got: soft.rows() * soft.cols(),
        });
    }
    if probs.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

#[inline]
fn clamped_ln(v: f64) -> f64 {
    v.max(LOG_CLAMP).ln()
}

/// Mean categorical cross-entropy against hard labels.
pub fn ce_loss(probs: &Matrix, hard_labels: &[usize]) -> Result<f64> {
    check_labels(probs, hard_labels)?;
    let total: f64 = hard_labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -clamped_ln(probs.get(i, y)))
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Symmetric cross-entropy: `CE(target ‖ pred) + CE(pred ‖ target)`,
/// averaged over the batch.
pub fn sce_loss(probs: &Matrix, soft_labels: &Matrix) -> Result<f64> {
    check_soft(probs, soft_labels)?;
    let mut total = 0.0;
    for (p, q) in probs.iter_rows().zip(soft_labels.iter_rows()) {
        for (&pk, &qk) in p.iter().zip(q) {
            total -= qk * clamped_ln(pk) + pk * clamped_ln(qk);
        }
    }
    Ok(total / probs.rows() as f64)
}

/// Cross-entropy against `(1 − ε)·onehot + ε/K`.
pub fn label_smoothing_ce(probs: &Matrix, hard_labels: &[usize], epsilon: f64) -> Result<f64> {
    check_labels(probs, hard_labels)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("label smoothing must lie in [0, 1], got {epsilon}")));
    }
    let k = probs.cols() as f64;
    let mut total = 0.0;
    for (i, &y) in hard_labels.iter().enumerate() {
        for (j, &p) in probs.row(i).iter().enumerate() {
            let target = epsilon / k + if j == y { 1.0 - epsilon } else { 0.0 };
            total -= target * clamped_ln(p);
        }
    }
    Ok(total / probs.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::InvalidConfig("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }
}

fn check_dynamic<'a>(dynamic_labels: Option<&'a Matrix>, w: &LossWeights) -> Result<Option<&'a Matrix>> {
    match dynamic_labels {
        Some(q) => Ok(Some(q)),
        None if w.beta == 0.0 => Ok(None),
        None => Err(Error::InvalidConfig("beta > 0 requires dynamic soft labels".into())),
    }
}

/// `α·CE(static) + β·SCE(dynamic)`. Dynamic labels may be omitted when
/// `β = 0`.
pub fn combined_loss(
    model: &SoftmaxLinearModel,
    batch: &Matrix,
    static_labels: &[usize],
    dynamic_labels: Option<&Matrix>,
    w: &LossWeights,
) -> Result<f64> {
    let (_, probs) = forward(model, batch)?;
    let dynamic = check_dynamic(dynamic_labels, w)?;
    let mut loss = w.alpha * ce_loss(&probs, static_labels)?;
    if let Some(q) = dynamic {
        loss += w.beta * sce_loss(&probs, q)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullGradients {
    pub extractor: ExtractorGradients,
    pub classifier_weights: Matrix,
    pub classifier_bias: Vec<f64>,
}

/// Backpropagates `dL/dp` (already scaled by `1/B`) through the softmax, the
/// classifier and the extractor.
fn backprop(model: &SoftmaxLinearModel, x: &Matrix, cache: &ForwardCache, dl_dp: &Matrix, with_classifier: bool) -> FullGradients {
    let (b, k) = cache.probs.shape();
    let d = model.feature_dim();
    // softmax Jacobian: du_j = p_j (g_j - Σ_k p_k g_k)
    let mut du = Matrix::zeros(b, k);
    for i in 0..b {
        let p = cache.probs.row(i);
        let g = dl_dp.row(i);
        let inner: f64 = p.iter().zip(g).map(|(a, c)| a * c).sum();
        for (o, (&pj, &gj)) in du.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - inner);
        }
    }

    let v = &model.classifier.weights;
    let mut dz = Matrix::zeros(b, d);
    for i in 0..b {
        let dui = du.row(i);
        let hi = cache.features.row(i);
        for t in 0..d {
            let mut s = 0.0;
            for (j, &g) in dui.iter().enumerate() {
                s += g * v.get(j, t);
            }
            dz.set(i, t, s * model.activation.derivative_from_output(hi[t]));
        }
    }

    let mut dw = Matrix::zeros(d, model.input_dim());
    let mut db = vec![0.0; d];
    for i in 0..b {
        let xi = x.row(i);
        for t in 0..d {
            let g = dz.get(i, t);
            db[t] += g;
            for (o, &xv) in dw.row_mut(t).iter_mut().zip(xi) {
                *o += g * xv;
            }
        }
    }

    let (mut dv, mut dc) = (Matrix::zeros(0, 0), Vec::new());
    if with_classifier {
        dv = Matrix::zeros(k, d);
        dc = vec![0.0; k];
        for i in 0..b {
            let hi = cache.features.row(i);
            for j in 0..k {
                let g = du.get(i, j);
                dc[j] += g;
                for (o, &h) in dv.row_mut(j).iter_mut().zip(hi) {
                    *o += g * h;
                }
            }
        }
    }
    FullGradients {
        extractor: ExtractorGradients { weights: dw, bias: db },
        classifier_weights: dv,
        classifier_bias: dc,
    }
}

/// Analytic gradient of [`combined_loss`] with respect to the extractor
/// weights and bias. Pseudo-labels are treated as constants.
pub fn gradients(
    model: &SoftmaxLinearModel,
    batch: &Matrix,
    static_labels: &[usize],
    dynamic_labels: Option<&Matrix>,
    w: &LossWeights,
) -> Result<ExtractorGradients> {
    let cache = forward_cache(model, batch)?;
    check_labels(&cache.probs, static_labels)?;
    let dynamic = check_dynamic(dynamic_labels, w)?;
    if let Some(q) = dynamic {
        check_soft(&cache.probs, q)?;
    }
    let (b, k) = cache.probs.shape();
    let scale = 1.0 / b as f64;
    let mut dl_dp = Matrix::zeros(b, k);
    for i in 0..b {
        let p = cache.probs.row(i);
        let row = dl_dp.row_mut(i);
        let y = static_labels[i];
        if p[y] > LOG_CLAMP {
            row[y] -= w.alpha * scale / p[y];
        }
        if let Some(q) = dynamic {
            let q = q.row(i);
            for j in 0..k {
                let mut g = -clamped_ln(q[j]);
                if p[j] > LOG_CLAMP {
                    g -= q[j] / p[j];
                }
                row[j] += w.beta * scale * g;
            }
        }
    }
    Ok(backprop(model, batch, &cache, &dl_dp, false).extractor)
}

/// Gradient of [`label_smoothing_ce`] with respect to every parameter,
/// classifier included. Used for source training only.
pub fn smoothed_ce_gradients(model: &SoftmaxLinearModel, batch: &Matrix, labels: &[usize], epsilon: f64) -> Result<FullGradients> {
    let cache = forward_cache(model, batch)?;
    check_labels(&cache.probs, labels)?;
    let (b, k) = cache.probs.shape();
    let scale = 1.0 / b as f64;
    let mut dl_dp = Matrix::zeros(b, k);
    for i in 0..b {
        let p = cache.probs.row(i);
        let row = dl_dp.row_mut(i);
        for j in 0..k {
            let target = epsilon / k as f64 + if j == labels[i] { 1.0 - epsilon } else { 0.0 };
            if p[j] > LOG_CLAMP {
                row[j] = -scale * target / p[j];
            }
        }
    }
    Ok(backprop(model, batch, &cache, &dl_dp, true))
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }
}

/// One optimizer per extractor tensor.
#[derive(Debug, Clone)]
pub struct ExtractorOptimizer {
    weights: SgdMomentum,
    bias: SgdMomentum,
}

impl ExtractorOptimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            weights: SgdMomentum::new(learning_rate, momentum),
            bias: SgdMomentum::new(learning_rate, momentum),
        }
    }

    pub fn step(&mut self, model: &mut SoftmaxLinearModel, grads: &ExtractorGradients) {
        step_matrix(&mut self.weights, &mut model.extractor_weights, &grads.weights);
        self.bias.step(&mut model.extractor_bias, &grads.bias);
    }
}

fn step_matrix(opt: &mut SgdMomentum, m: &mut Matrix, grads: &Matrix) {
    let (rows, cols) = m.shape();
    let mut data = std::mem::replace(m, Matrix::zeros(0, 0)).into_vec();
    opt.step(&mut data, grads.as_slice());
    *m = Matrix::from_vec(rows, cols, data).expect("SGD step produced a non-finite weight");
}

/// Optimizer over every parameter, for source training.
#[derive(Debug, Clone)]
pub struct FullOptimizer {
    extractor: ExtractorOptimizer,
    classifier_weights: SgdMomentum,
    classifier_bias: SgdMomentum,
}

impl FullOptimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            extractor: ExtractorOptimizer::new(learning_rate, momentum),
            classifier_weights: SgdMomentum::new(learning_rate, momentum),
            classifier_bias: SgdMomentum::new(learning_rate, momentum),
        }
    }

    pub fn step(&mut self, model: &mut SoftmaxLinearModel, grads: &FullGradients) {
        self.extractor.step(model, &grads.extractor);
        let (w, b) = model.classifier_mut().params_mut();
        step_matrix(&mut self.classifier_weights, w, &grads.classifier_weights);
        self.classifier_bias.step(b, &grads.classifier_bias);
    }
}

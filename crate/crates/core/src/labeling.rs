//! Static pseudo-labeling strategies.
//!
//! * `naive`: argmax of the classifier output.
//! * `mono`: probability-weighted class centroids, nearest-prototype labels,
//!   then indicator-weighted refinement rounds.
//! * `bp`: each class averages its own top-`M` instances, so every class
//!   contributes exactly `M` members regardless of how confident the
//!   classifier is on it. Refinement re-ranks by prototype softmax.
//! * `bmp`: like `bp`, but each class's selection is split by k-means into
//!   `S` prototypes and an instance scores a class by its best-matching one.
//!
//! Every function here L2-normalizes the incoming features first and works
//! with cosine similarity. Hard labels are argmax of similarity (equivalently
//! argmin of cosine distance) with ties going to the lowest class index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, KMeansConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, dot, l2_norm, l2_normalize_rows, mix_seed, normalize_in_place, softmax_into, Matrix,
};

const DEGENERATE_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStrategy {
    Naive,
    Mono,
    Bp,
    Bmp,
}

/// `K × S` prototypes of dimension `d`, stored class-major: row `k * S + i`
/// holds prototype `i` of class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Matrix,
    num_classes: usize,
    per_class: usize,
    normalized: bool,
    degenerate: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(prototypes: Matrix, num_classes: usize, per_class: usize, normalized: bool) -> Result<Self> {
        if per_class == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig("prototype bank needs K >= 1 and S >= 1".into()));
        }
        if prototypes.rows() != num_classes * per_class {
            return Err(Error::DimensionMismatch {
                expected: num_classes * per_class,
                got: prototypes.rows(),
            });
        }
        let degenerate = (0..num_classes)
            .map(|k| (0..per_class).all(|i| l2_norm(prototypes.row(k * per_class + i)) < DEGENERATE_WEIGHT))
            .collect();
        Ok(Self {
            prototypes,
            num_classes,
            per_class,
            normalized,
            degenerate,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn prototype(&self, class: usize, i: usize) -> &[f64] {
        self.prototypes.row(class * self.per_class + i)
    }

    /// All prototypes as a `(K·S) × d` matrix.
    pub fn as_matrix(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn is_degenerate(&self, class: usize) -> bool {
        self.degenerate[class]
    }

    pub fn degenerate_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&k| self.degenerate[k]).collect()
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.prototypes
    }

    pub(crate) fn set_normalized(&mut self, normalized: bool) {
        self.normalized = normalized;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelBank {
    pub hard_labels: Vec<usize>,
    /// Row-stochastic `n × K` class distribution behind the hard labels.
    pub soft_labels: Option<Matrix>,
    pub strategy: LabelStrategy,
    pub refinement_rounds_used: usize,
    /// Number of instances aggregated per class in the last selection step
    /// (empty for strategies without top-`M` selection).
    pub selection_sizes: Vec<usize>,
}

impl LabelBank {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSpec {
    pub ratio: f64,
    pub num_classes: usize,
    pub n_t: usize,
}

impl SamplingSpec {
    pub fn new(ratio: f64, num_classes: usize, n_t: usize) -> Result<Self> {
        if !(ratio > 0.0) || !ratio.is_finite() {
            return Err(Error::InvalidConfig(format!("selection ratio must be > 0, got {ratio}")));
        }
        if num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        Ok(Self { ratio, num_classes, n_t })
    }

    pub fn m(&self) -> usize {
        compute_m(self)
    }
}

/// Per-class selection size `max(1, floor(n_t / (r·K)))`.
pub fn compute_m(spec: &SamplingSpec) -> usize {
    let raw = spec.n_t as f64 / (spec.ratio * spec.num_classes as f64);
    (raw.floor() as usize).max(1)
}

/// Indices of the `m` largest scores, ordered by descending score with
/// equal scores preferring the lower index.
///
/// Downstream averaging and clustering consume the selection in this rank
/// order, so their results do not depend on where instances sit in the
/// input (given distinct scores).
pub fn top_m_select(scores: &[f64], m: usize) -> Vec<usize> {
    let m = m.min(scores.len());
    if m == 0 {
        return Vec::new();
    }
    let by_rank = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, by_rank);
        idx.truncate(m);
    }
    idx.sort_unstable_by(by_rank);
    idx
}

pub fn naive_labels(probs: &Matrix) -> LabelBank {
    LabelBank {
        hard_labels: probs.iter_rows().map(argmax).collect(),
        soft_labels: Some(probs.clone()),
        strategy: LabelStrategy::Naive,
        refinement_rounds_used: 0,
        selection_sizes: Vec::new(),
    }
}

fn check_aligned(features: &Matrix, probs: &Matrix) -> Result<()> {
    if features.rows() != probs.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: probs.rows(),
        });
    }
    if features.rows() == 0 || probs.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn check_bank_dim(features: &Matrix, bank: &PrototypeBank) -> Result<()> {
    if features.cols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: features.cols(),
        });
    }
    Ok(())
}

/// Best similarity to any prototype of each class: `n × K`, with
/// degenerate classes at `-inf`. Features must already be unit-normalized.
fn class_similarity(unit_features: &Matrix, bank: &PrototypeBank) -> Vec<f64> {
    let k = bank.num_classes();
    let s = bank.per_class();
    let mut out = Vec::with_capacity(unit_features.rows() * k);
    for x in unit_features.iter_rows() {
        for class in 0..k {
            if bank.is_degenerate(class) {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for i in 0..s {
                let v = dot(x, bank.prototype(class, i));
                if v > best {
                    best = v;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Class scores `max_i exp(x·c_k^i) / Σ_j max_i exp(x·c_j^i)` and the
/// argmax labels, computed from one similarity pass so the two never
/// disagree.
pub(crate) fn prototype_assignment(unit_features: &Matrix, bank: &PrototypeBank) -> Result<(Vec<usize>, Matrix)> {
    if bank.degenerate.iter().all(|&d| d) {
        return Err(Error::AllPrototypesDegenerate);
    }
    let k = bank.num_classes();
    let sims = class_similarity(unit_features, bank);
    let mut soft = Matrix::zeros(unit_features.rows(), k);
    let mut hard = Vec::with_capacity(unit_features.rows());
    for (i, row) in sims.chunks_exact(k).enumerate() {
        hard.push(argmax(row));
        softmax_into(row, soft.row_mut(i));
    }
    Ok((hard, soft))
}

/// Probability-weighted centroid per class from all instances, then
/// normalized. Classes whose total weight is below `1e-12` get a zero
/// prototype and are flagged degenerate.
pub fn mono_prototypes(features: &Matrix, probs: &Matrix) -> Result<PrototypeBank> {
    check_aligned(features, probs)?;
    let x = l2_normalize_rows(features);
    let (k, d) = (probs.cols(), x.cols());
    let mut protos = Matrix::zeros(k, d);
    let mut weight = vec![0.0; k];
    for (xi, pi) in x.iter_rows().zip(probs.iter_rows()) {
        for class in 0..k {
            let w = pi[class];
            weight[class] += w;
            for (c, &v) in protos.row_mut(class).iter_mut().zip(xi) {
                *c += w * v;
            }
        }
    }
    for class in 0..k {
        let row = protos.row_mut(class);
        if weight[class] < DEGENERATE_WEIGHT {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= weight[class]);
            normalize_in_place(row);
        }
    }
    PrototypeBank::new(protos, k, 1, true)
}

/// Nearest-prototype labels under cosine distance. Degenerate prototypes
/// never win.
pub fn nearest_prototype_labels(features: &Matrix, bank: &PrototypeBank) -> Result<LabelBank> {
    if bank.per_class() != 1 {
        return Err(Error::InvalidConfig(format!(
            "nearest-prototype labeling needs one prototype per class, bank has {}",
            bank.per_class()
        )));
    }
    check_bank_dim(features, bank)?;
    let x = l2_normalize_rows(features);
    let (hard, soft) = prototype_assignment(&x, bank)?;
    Ok(LabelBank {
        hard_labels: hard,
        soft_labels: Some(soft),
        strategy: LabelStrategy::Mono,
        refinement_rounds_used: 0,
        selection_sizes: Vec::new(),
    })
}

/// Alternates hard-label centroids and nearest-prototype reassignment
/// `rounds` times. A class left without members keeps its prototype from
/// `bank`.
pub fn mono_refine(
    features: &Matrix,
    bank: &PrototypeBank,
    labels: &LabelBank,
    rounds: usize,
) -> Result<(PrototypeBank, LabelBank)> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("mono refinement needs rounds >= 1".into()));
    }
    if bank.per_class() != 1 {
        return Err(Error::InvalidConfig("mono refinement needs one prototype per class".into()));
    }
    check_bank_dim(features, bank)?;
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    let x = l2_normalize_rows(features);
    let k = bank.num_classes();
    let mut bank = bank.clone();
    let mut hard = labels.hard_labels.clone();
    let mut soft = None;
    for _ in 0..rounds {
        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (xi, &y) in x.iter_rows().zip(&hard) {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, num_classes: k });
            }
            counts[y] += 1;
            for (s, &v) in sums.row_mut(y).iter_mut().zip(xi) {
                *s += v;
            }
        }
        let mut protos = bank.as_matrix().clone();
        for class in 0..k {
            if counts[class] == 0 {
                continue;
            }
            let row = protos.row_mut(class);
            row.copy_from_slice(sums.row(class));
            let c = counts[class] as f64;
            row.iter_mut().for_each(|v| *v /= c);
            normalize_in_place(row);
        }
        bank = PrototypeBank::new(protos, k, 1, true)?;
        let (h, s) = prototype_assignment(&x, &bank)?;
        hard = h;
        soft = Some(s);
    }
    Ok((
        bank,
        LabelBank {
            hard_labels: hard,
            soft_labels: soft,
            strategy: LabelStrategy::Mono,
            refinement_rounds_used: rounds,
            selection_sizes: Vec::new(),
        },
    ))
}

/// Weighted prototypes, nearest-prototype labels, then `rounds` of
/// hard-label refinement (none when `rounds == 0`).
pub fn mono_strategy(features: &Matrix, probs: &Matrix, rounds: usize) -> Result<(PrototypeBank, LabelBank)> {
    let bank = mono_prototypes(features, probs)?;
    let labels = nearest_prototype_labels(features, &bank)?;
    if rounds == 0 {
        return Ok((bank, labels));
    }
    mono_refine(features, &bank, &labels, rounds)
}

fn check_sampling(features: &Matrix, probs: &Matrix, spec: &SamplingSpec) -> Result<()> {
    check_aligned(features, probs)?;
    if spec.num_classes != probs.cols() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_classes,
            got: probs.cols(),
        });
    }
    if spec.n_t != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_t,
            got: features.rows(),
        });
    }
    Ok(())
}

/// Top-`m` instances of every class column of `scores` (`n × K`).
fn balanced_selection(scores: &Matrix, m: usize) -> Vec<Vec<usize>> {
    (0..scores.cols())
        .map(|k| top_m_select(&scores.column(k), m))
        .collect()
}

fn mean_prototypes(x: &Matrix, selection: &[Vec<usize>]) -> Result<PrototypeBank> {
    let k = selection.len();
    let mut protos = Matrix::zeros(k, x.cols());
    for (class, sel) in selection.iter().enumerate() {
        assert!(!sel.is_empty(), "top-M selection is never empty");
        let mut mean = x.select_rows(sel).row_mean()?;
        normalize_in_place(&mut mean);
        protos.row_mut(class).copy_from_slice(&mean);
    }
    PrototypeBank::new(protos, k, 1, true)
}

/// Class-balanced prototypes: each class averages its top-`M` instances by
/// classifier probability, then `rounds` refinement passes re-rank by
/// prototype softmax and re-average. Labels are nearest-prototype.
pub fn bp_prototypes(
    features: &Matrix,
    probs: &Matrix,
    spec: &SamplingSpec,
    rounds: usize,
) -> Result<(PrototypeBank, LabelBank)> {
    check_sampling(features, probs, spec)?;
    let x = l2_normalize_rows(features);
    let m = spec.m();
    let mut selection = balanced_selection(probs, m);
    let mut bank = mean_prototypes(&x, &selection)?;
    for _ in 0..rounds {
        let (_, scores) = prototype_assignment(&x, &bank)?;
        selection = balanced_selection(&scores, m);
        bank = mean_prototypes(&x, &selection)?;
    }
    let (hard, soft) = prototype_assignment(&x, &bank)?;
    Ok((
        bank,
        LabelBank {
            hard_labels: hard,
            soft_labels: Some(soft),
            strategy: LabelStrategy::Bp,
            refinement_rounds_used: rounds,
            selection_sizes: selection.iter().map(Vec::len).collect(),
        },
    ))
}

fn multicentric_prototypes(
    x: &Matrix,
    selection: &[Vec<usize>],
    kcfg: &KMeansConfig,
    round: usize,
) -> Result<PrototypeBank> {
    let k = selection.len();
    let s = kcfg.num_clusters;
    let per_class: Vec<Matrix> = selection
        .par_iter()
        .enumerate()
        .map(|(class, sel)| {
            assert!(!sel.is_empty(), "top-M selection is never empty");
            let mut cfg = kcfg.clone();
            cfg.seed = mix_seed(kcfg.seed, ((round as u64) << 32) | class as u64);
            let mut centroids = kmeans(&x.select_rows(sel), &cfg)?.centroids;
            for i in 0..s {
                normalize_in_place(centroids.row_mut(i));
            }
            Ok(centroids)
        })
        .collect::<Result<_>>()?;
    let mut protos = Matrix::zeros(k * s, x.cols());
    for (class, c) in per_class.iter().enumerate() {
        for i in 0..s {
            protos.row_mut(class * s + i).copy_from_slice(c.row(i));
        }
    }
    PrototypeBank::new(protos, k, s, true)
}

/// Balanced multicentric prototypes. Each class clusters its top-`M`
/// selection into `kcfg.num_clusters` prototypes; labels and soft labels
/// come from the max-over-prototypes class softmax. Refinement rounds
/// re-rank by that softmax and re-cluster.
///
/// With one prototype per class the hard labels are identical to
/// [`bp_prototypes`] for the same inputs.
pub fn bmp_prototypes(
    features: &Matrix,
    probs: &Matrix,
    spec: &SamplingSpec,
    kcfg: &KMeansConfig,
    rounds: usize,
) -> Result<(PrototypeBank, LabelBank)> {
    kcfg.validate()?;
    check_sampling(features, probs, spec)?;
    let x = l2_normalize_rows(features);
    let m = spec.m();
    let mut selection = balanced_selection(probs, m);
    let mut bank = multicentric_prototypes(&x, &selection, kcfg, 0)?;
    for round in 1..=rounds {
        let (_, scores) = prototype_assignment(&x, &bank)?;
        selection = balanced_selection(&scores, m);
        bank = multicentric_prototypes(&x, &selection, kcfg, round)?;
    }
    let (hard, soft) = prototype_assignment(&x, &bank)?;
    Ok((
        bank,
        LabelBank {
            hard_labels: hard,
            soft_labels: Some(soft),
            strategy: LabelStrategy::Bmp,
            refinement_rounds_used: rounds,
            selection_sizes: selection.iter().map(Vec::len).collect(),
        },
    ))
}

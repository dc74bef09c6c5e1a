//! Minibatch-level dynamic pseudo-labels.
//!
//! At each epoch boundary the state is seeded from the static multicentric
//! bank. Every training step then (a) scores the batch against the current
//! prototypes to get soft labels, and (b) re-estimates each prototype as the
//! responsibility-weighted mean of the batch and folds that estimate in with
//! momentum `λ`.

use crate::error::{Error, Result};
use crate::labeling::{prototype_assignment, PrototypeBank};
use crate::numerics::{dot, l2_normalize_rows, normalize_in_place, softmax_into, Matrix};

const MIN_RESPONSIBILITY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicPrototypeState {
    bank: PrototypeBank,
    momentum: f64,
    updates_applied: usize,
    renormalize: bool,
}

/// Batch re-estimate of every prototype, aligned with the bank's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEstimate {
    pub prototypes: Matrix,
    /// `false` where the batch put less than `1e-12` total responsibility on a
    /// prototype; those rows repeat the current prototype.
    pub updated: Vec<bool>,
}

impl DynamicPrototypeState {
    pub fn new(bank: PrototypeBank, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidConfig(format!("EMA momentum must lie in (0, 1), got {momentum}")));
        }
        Ok(Self {
            bank,
            momentum,
            updates_applied: 0,
            renormalize: true,
        })
    }

    /// Skip the unit-norm projection after each EMA step. Only useful for
    /// checking the raw EMA recursion.
    pub fn without_renormalization(mut self) -> Self {
        self.renormalize = false;
        self
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn updates_applied(&self) -> usize {
        self.updates_applied
    }

    /// `c ← λc + (1 − λ)ĉ` for every prototype, then back onto the unit
    /// sphere.
    pub fn ema_update(&mut self, estimate: &PrototypeEstimate) -> Result<()> {
        let current = self.bank.as_matrix();
        if estimate.prototypes.shape() != current.shape() {
            return Err(Error::DimensionMismatch {
                expected: current.rows() * current.cols(),
                got: estimate.prototypes.rows() * estimate.prototypes.cols(),
            });
        }
        let lambda = self.momentum;
        let renormalize = self.renormalize;
        let protos = self.bank.matrix_mut();
        for r in 0..protos.rows() {
            let row = protos.row_mut(r);
            for (c, &e) in row.iter_mut().zip(estimate.prototypes.row(r)) {
                *c = lambda * *c + (1.0 - lambda) * e;
            }
            if renormalize {
                normalize_in_place(row);
            }
        }
        self.bank.set_normalized(renormalize);
        self.updates_applied += 1;
        Ok(())
    }
}

fn check_batch(batch: &Matrix, state: &DynamicPrototypeState) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if batch.cols() != state.bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.bank.dim(),
            got: batch.cols(),
        });
    }
    Ok(())
}

/// Soft class distribution per instance: `max_i exp(x·c_k^i)` normalized
/// over classes.
pub fn dynamic_soft_labels(batch_features: &Matrix, state: &DynamicPrototypeState) -> Result<Matrix> {
    check_batch(batch_features, state)?;
    let x = l2_normalize_rows(batch_features);
    let (_, soft) = prototype_assignment(&x, &state.bank)?;
    Ok(soft)
}

/// Responsibility-weighted batch means. Responsibilities are a softmax of
/// `x·c_k^i` over all `K·S` prototypes jointly.
pub fn batch_prototype_estimate(batch_features: &Matrix, state: &DynamicPrototypeState) -> Result<PrototypeEstimate> {
    check_batch(batch_features, state)?;
    let x = l2_normalize_rows(batch_features);
    let protos = state.bank.as_matrix();
    let (p, d) = (protos.rows(), protos.cols());

    let mut sums = Matrix::zeros(p, d);
    let mut mass = vec![0.0; p];
    let mut sims = vec![0.0; p];
    let mut resp = vec![0.0; p];
    for xi in x.iter_rows() {
        for (s, c) in sims.iter_mut().zip(protos.iter_rows()) {
            *s = dot(xi, c);
        }
        softmax_into(&sims, &mut resp);
        for j in 0..p {
            mass[j] += resp[j];
            for (acc, &v) in sums.row_mut(j).iter_mut().zip(xi) {
                *acc += resp[j] * v;
            }
        }
    }

    let mut updated = vec![true; p];
    for j in 0..p {
        let row = sums.row_mut(j);
        if mass[j] < MIN_RESPONSIBILITY {
            row.copy_from_slice(protos.row(j));
            updated[j] = false;
        } else {
            row.iter_mut().for_each(|v| *v /= mass[j]);
        }
    }
    Ok(PrototypeEstimate {
        prototypes: sums,
        updated,
    })
}

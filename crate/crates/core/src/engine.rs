//! Source training, the adaptation schedule and strategy ablations.
//!
//! Each adaptation epoch extracts features for the whole target set,
//! refreshes the static pseudo-labels with the configured strategy and then
//! walks a seeded shuffle of minibatches. For `bmd` the dynamic prototype
//! state is re-seeded from the fresh multicentric bank at every epoch start
//! and updated by EMA after every step.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{generate_domain_pair, BenchmarkProfile, DomainPair, LabeledSet};
use crate::clustering::{KMeansConfig, KMeansInit};
use crate::dynamic::{batch_prototype_estimate, dynamic_soft_labels, DynamicPrototypeState};
use crate::error::{Error, Result};
use crate::labeling::{bmp_prototypes, bp_prototypes, mono_strategy, naive_labels, LabelBank, PrototypeBank, SamplingSpec};
use crate::metrics::{class_balance, compute_metrics, HeldOutLabels, MetricsReport};
use crate::numerics::{argmax, l2_normalize_rows, mix_seed, Matrix, SeededRng};
use crate::objectives::{
    combined_loss, forward, gradients, smoothed_ce_gradients, Activation, ExtractorOptimizer, FullOptimizer, LossWeights,
    SoftmaxLinearModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Mono,
    Bp,
    Bmp,
    Bmd,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Naive, Strategy::Mono, Strategy::Bp, Strategy::Bmp, Strategy::Bmd];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Mono => "mono",
            Strategy::Bp => "bp",
            Strategy::Bmp => "bmp",
            Strategy::Bmd => "bmd",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy '{s}' (valid: naive, mono, bp, bmp, bmd)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    /// `r` in the per-class selection size `floor(n_t / (r·K))`.
    pub selection_ratio: f64,
    /// `S`, prototypes per class for `bmp` and `bmd`.
    pub prototypes_per_class: usize,
    pub refinement_rounds: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_init: KMeansInit,
    pub alpha: f64,
    /// Ignored (treated as 0) for every strategy except `bmd`.
    pub beta: f64,
    pub ema_momentum: f64,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Bmd,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-2,
            sgd_momentum: 0.9,
            selection_ratio: 3.0,
            prototypes_per_class: 4,
            refinement_rounds: 2,
            kmeans_max_iters: 100,
            kmeans_init: KMeansInit::KMeansPlusPlus,
            alpha: 0.3,
            beta: 0.1,
            ema_momentum: 0.9999,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    /// Loss weights actually used: `β` is zeroed below `bmd`.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: if self.strategy == Strategy::Bmd { self.beta } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::InvalidConfig("sgd_momentum must lie in [0, 1)".into()));
        }
        if !(self.selection_ratio > 0.0) || !self.selection_ratio.is_finite() {
            return Err(Error::InvalidConfig("selection_ratio must be > 0".into()));
        }
        if self.prototypes_per_class == 0 {
            return Err(Error::InvalidConfig("prototypes_per_class must be >= 1".into()));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::InvalidConfig("kmeans_max_iters must be >= 1".into()));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::InvalidConfig("ema_momentum must lie in (0, 1)".into()));
        }
        self.loss_weights().validate()
    }

    fn kmeans_config(&self, epoch: usize) -> KMeansConfig {
        KMeansConfig {
            max_iters: self.kmeans_max_iters,
            ..KMeansConfig::new(self.prototypes_per_class)
                .with_seed(mix_seed(self.seed, epoch as u64))
                .with_init(self.kmeans_init)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub feature_dim: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            activation: Activation::Tanh,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-2,
            sgd_momentum: 0.9,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

/// Order in which instances are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    SeededRng::new(seed).derive(epoch as u64).permutation(n)
}

/// Supervised training with label-smoothed cross-entropy, starting from
/// `model`. Zero epochs return the model unchanged.
pub fn train_source(mut model: SoftmaxLinearModel, data: &LabeledSet, cfg: &SourceConfig) -> Result<SoftmaxLinearModel> {
    if data.inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if data.labels.len() != data.inputs.rows() {
        return Err(Error::DimensionMismatch {
            expected: data.inputs.rows(),
            got: data.labels.len(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut opt = FullOptimizer::new(cfg.learning_rate, cfg.sgd_momentum);
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(cfg.seed, epoch, data.inputs.rows()).chunks(cfg.batch_size) {
            let x = data.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let g = smoothed_ce_gradients(&model, &x, &y, cfg.label_smoothing)?;
            opt.step(&mut model, &g);
        }
    }
    Ok(model)
}

/// Fresh model initialized from `cfg.seed` and trained on `data`.
pub fn init_and_train_source(data: &LabeledSet, num_classes: usize, cfg: &SourceConfig) -> Result<SoftmaxLinearModel> {
    let mut rng = SeededRng::new(cfg.seed).derive(u64::MAX);
    let model = SoftmaxLinearModel::init(data.inputs.cols(), cfg.feature_dim, num_classes, cfg.activation, &mut rng);
    train_source(model, data, cfg)
}

pub fn predict(model: &SoftmaxLinearModel, x: &Matrix) -> Result<Vec<usize>> {
    let (_, probs) = forward(model, x)?;
    Ok(probs.iter_rows().map(argmax).collect())
}

/// Static pseudo-labels of `strategy` for the given features and
/// probabilities. Also returns the multicentric bank for `bmp` and `bmd`.
pub fn static_labels(
    features: &Matrix,
    probs: &Matrix,
    cfg: &AdaptationConfig,
    epoch: usize,
) -> Result<(LabelBank, Option<PrototypeBank>)> {
    let spec = || SamplingSpec::new(cfg.selection_ratio, probs.cols(), features.rows());
    Ok(match cfg.strategy {
        Strategy::Naive => (naive_labels(probs), None),
        Strategy::Mono => (mono_strategy(features, probs, cfg.refinement_rounds)?.1, None),
        Strategy::Bp => (bp_prototypes(features, probs, &spec()?, cfg.refinement_rounds)?.1, None),
        Strategy::Bmp | Strategy::Bmd => {
            let (bank, labels) = bmp_prototypes(features, probs, &spec()?, &cfg.kmeans_config(epoch), cfg.refinement_rounds)?;
            (labels, Some(bank))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Accuracy of the static pseudo-labels used during this epoch.
    pub pseudo_label_accuracy: Option<f64>,
    pub pseudo_label_class_accuracy: Vec<Option<f64>>,
    /// Accuracy of the model's own predictions at the start of the epoch.
    pub predicted_accuracy: Option<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub config: AdaptationConfig,
    pub epochs: Vec<EpochRecord>,
    pub initial_metrics: Option<MetricsReport>,
    pub final_metrics: Option<MetricsReport>,
    pub final_predictions: Vec<usize>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        a == *other
    }
}

fn maybe_metrics(pred: &[usize], truth: Option<&HeldOutLabels>, k: usize) -> Result<Option<MetricsReport>> {
    truth.map(|t| compute_metrics(pred, t, k)).transpose()
}

/// Adapts the feature extractor to the unlabeled `target` set. The
/// classifier is left untouched. `truth` is only used for the metrics in
/// the returned record.
pub fn adapt(
    mut model: SoftmaxLinearModel,
    target: &Matrix,
    cfg: &AdaptationConfig,
    truth: Option<&HeldOutLabels>,
) -> Result<(SoftmaxLinearModel, RunRecord)> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(t) = truth {
        if t.len() != target.rows() {
            return Err(Error::DimensionMismatch {
                expected: target.rows(),
                got: t.len(),
            });
        }
    }
    let start = Instant::now();
    let k = model.num_classes();
    let weights = cfg.loss_weights();
    let mut opt = ExtractorOptimizer::new(cfg.learning_rate, cfg.sgd_momentum);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let initial_pred = predict(&model, target)?;
    let initial_metrics = maybe_metrics(&initial_pred, truth, k)?;

    for epoch in 0..cfg.epochs {
        let (features, probs) = forward(&model, target)?;
        let predicted: Vec<usize> = probs.iter_rows().map(argmax).collect();
        let (labels, bank) = static_labels(&features, &probs, cfg, epoch)?;
        drop((features, probs));
        let pseudo = maybe_metrics(&labels.hard_labels, truth, k)?;
        let predicted_accuracy = maybe_metrics(&predicted, truth, k)?.map(|m| m.overall_accuracy);

        let mut state = match (cfg.strategy, bank) {
            (Strategy::Bmd, Some(bank)) => Some(DynamicPrototypeState::new(bank, cfg.ema_momentum)?),
            _ => None,
        };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in epoch_order(cfg.seed, epoch, target.rows()).chunks(cfg.batch_size) {
            let x = target.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels.hard_labels[i]).collect();
            let (batch_features, dynamic) = match &state {
                Some(s) => {
                    let (f, _) = forward(&model, &x)?;
                    let f = l2_normalize_rows(&f);
                    let q = dynamic_soft_labels(&f, s)?;
                    (Some(f), Some(q))
                }
                None => (None, None),
            };
            let dyn_for_loss = dynamic.as_ref().filter(|_| weights.beta > 0.0);
            loss_sum += combined_loss(&model, &x, &y, dyn_for_loss, &weights)?;
            batches += 1;
            let g = gradients(&model, &x, &y, dyn_for_loss, &weights)?;
            opt.step(&mut model, &g);
            if let (Some(s), Some(f)) = (state.as_mut(), batch_features.as_ref()) {
                let estimate = batch_prototype_estimate(f, s)?;
                s.ema_update(&estimate)?;
            }
        }
        epochs.push(EpochRecord {
            epoch,
            pseudo_label_accuracy: pseudo.as_ref().map(|m| m.overall_accuracy),
            pseudo_label_class_accuracy: pseudo.map(|m| m.per_class_accuracy).unwrap_or_default(),
            predicted_accuracy,
            mean_loss: loss_sum / batches as f64,
        });
    }

    let final_predictions = predict(&model, target)?;
    let final_metrics = maybe_metrics(&final_predictions, truth, k)?;
    let record = RunRecord {
        strategy: cfg.strategy,
        config: cfg.clone(),
        epochs,
        initial_metrics,
        final_metrics,
        final_predictions,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, record))
}

/// Everything needed to run the benchmark end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkProfile,
    pub source: SourceConfig,
    pub adaptation: AdaptationConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.adaptation.validate()?;
        self.benchmark.to_spec(0)?;
        if self.source.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Data and source model for one seed.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub seed: u64,
    pub pair: DomainPair,
    pub source_model: SoftmaxLinearModel,
    pub source_metrics: MetricsReport,
}

pub fn prepare_task(exp: &ExperimentConfig, seed: u64) -> Result<PreparedTask> {
    let spec = exp.benchmark.to_spec(seed)?;
    let pair = generate_domain_pair(&spec)?;
    let source_cfg = SourceConfig {
        seed: mix_seed(exp.source.seed, seed),
        ..exp.source.clone()
    };
    let source_model = init_and_train_source(&pair.source, spec.num_classes, &source_cfg)?;
    let source_metrics = compute_metrics(&predict(&source_model, &pair.target)?, &pair.target_truth, spec.num_classes)?;
    Ok(PreparedTask {
        seed,
        pair,
        source_model,
        source_metrics,
    })
}

/// Adapts the task's source model with `strategy`.
pub fn run_strategy(task: &PreparedTask, base: &AdaptationConfig, strategy: Strategy) -> Result<RunRecord> {
    let cfg = AdaptationConfig {
        strategy,
        seed: mix_seed(base.seed, task.seed),
        ..base.clone()
    };
    let (_, record) = adapt(task.source_model.clone(), &task.pair.target, &cfg, Some(&task.pair.target_truth))?;
    Ok(record)
}

/// Summary of one table row across seeds. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub cv_mean: f64,
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_cv: Vec<f64>,
    pub class_accuracy_mean: Vec<Option<f64>>,
    /// Mean epoch-0 pseudo-label accuracy; `None` for the source row or
    /// zero-epoch runs.
    pub epoch0_pseudo_accuracy_mean: Option<f64>,
    pub epoch0_pseudo_class_accuracy_mean: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub source: AblationRow,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, strategy: Strategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == strategy.as_str())
    }
}

fn mean_columns(rows: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    (0..width)
        .map(|j| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(j).copied().flatten()).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

fn summarize(name: &str, finals: &[&MetricsReport], epoch0: &[Option<&EpochRecord>]) -> Result<AblationRow> {
    let acc: Vec<f64> = finals.iter().map(|m| m.overall_accuracy).collect();
    let cv: Vec<f64> = finals.iter().map(|m| m.coefficient_of_variation).collect();
    let acc_stats = class_balance(&acc)?;
    let cv_stats = class_balance(&cv)?;
    let class_rows: Vec<Vec<Option<f64>>> = finals.iter().map(|m| m.per_class_accuracy.clone()).collect();
    let e0: Vec<&EpochRecord> = epoch0.iter().flatten().copied().collect();
    let e0_acc: Vec<f64> = e0.iter().filter_map(|e| e.pseudo_label_accuracy).collect();
    let e0_class: Vec<Vec<Option<f64>>> = e0.iter().map(|e| e.pseudo_label_class_accuracy.clone()).collect();
    Ok(AblationRow {
        name: name.to_string(),
        accuracy_mean: acc_stats.mean,
        accuracy_std: acc_stats.std,
        cv_mean: cv_stats.mean,
        per_seed_accuracy: acc,
        per_seed_cv: cv,
        class_accuracy_mean: mean_columns(&class_rows),
        epoch0_pseudo_accuracy_mean: (!e0_acc.is_empty()).then(|| e0_acc.iter().sum::<f64>() / e0_acc.len() as f64),
        epoch0_pseudo_class_accuracy_mean: mean_columns(&e0_class),
    })
}

/// Runs every strategy on every seed (seeds in parallel) and reports
/// per-strategy means, in the order given. All strategies share each seed's
/// data and source model.
pub fn ablation_suite(exp: &ExperimentConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<AblationTable> {
    exp.validate()?;
    if seeds.is_empty() || strategies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per_seed: Vec<(PreparedTask, Vec<RunRecord>)> = seeds
        .par_iter()
        .map(|&seed| {
            let task = prepare_task(exp, seed)?;
            let runs = strategies
                .iter()
                .map(|&s| run_strategy(&task, &exp.adaptation, s))
                .collect::<Result<Vec<_>>>()?;
            Ok((task, runs))
        })
        .collect::<Result<_>>()?;

    let source_finals: Vec<&MetricsReport> = per_seed.iter().map(|(t, _)| &t.source_metrics).collect();
    let source = summarize("source", &source_finals, &[])?;
    let rows = strategies
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let finals: Vec<&MetricsReport> = per_seed
                .iter()
                .map(|(_, runs)| runs[j].final_metrics.as_ref().expect("truth supplied"))
                .collect();
            let epoch0: Vec<Option<&EpochRecord>> = per_seed.iter().map(|(_, runs)| runs[j].epochs.first()).collect();
            summarize(s.as_str(), &finals, &epoch0)
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        source,
        rows,
    })
}

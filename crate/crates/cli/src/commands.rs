//! Command implementations behind the `bmd` binary.
//!
//! Data files (`*.csv`, `*.json`) depend only on inputs, flags and seed.
//! Timestamps and wall times go to a `.log` sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use bmd_core::clustering::{KMeansConfig, KMeansInit};
use bmd_core::engine::{ablation_suite, prepare_task, run_strategy, AblationTable, RunRecord, Strategy};
use bmd_core::labeling::{bmp_prototypes, bp_prototypes, mono_strategy, naive_labels, LabelBank, SamplingSpec};
use bmd_core::metrics::{pseudo_label_accuracy, HeldOutLabels, MetricsReport};
use bmd_core::numerics::softmax_rows;
use bmd_core::objectives::forward;
use serde::Serialize;

use crate::bank::{parse_feature_bank, write_feature_bank, FeatureBank};
use crate::config::RunConfigFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMethod {
    Naive,
    Mono,
    Bp,
    Bmp,
    /// The static half of BMD: multicentric balanced labels.
    BmdStatic,
}

impl LabelMethod {
    const NAMES: [(&'static str, LabelMethod); 5] = [
        ("naive", LabelMethod::Naive),
        ("mono", LabelMethod::Mono),
        ("bp", LabelMethod::Bp),
        ("bmp", LabelMethod::Bmp),
        ("bmd-static", LabelMethod::BmdStatic),
    ];

    pub fn as_str(self) -> &'static str {
        Self::NAMES.iter().find(|(_, m)| *m == self).map(|(n, _)| *n).unwrap()
    }
}

impl FromStr for LabelMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, m)| *m)
            .ok_or_else(|| format!("unknown strategy '{s}' (valid: naive, mono, bp, bmp, bmd-static)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelParams {
    pub method: LabelMethod,
    pub ratio: f64,
    pub prototypes: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            method: LabelMethod::BmdStatic,
            ratio: 3.0,
            prototypes: 4,
            rounds: 2,
            seed: 0,
        }
    }
}

/// Pseudo-labels for an exported bank. Every method needs logits.
pub fn label_feature_bank(bank: &FeatureBank, params: &LabelParams) -> Result<LabelBank> {
    let logits = bank
        .logits
        .as_ref()
        .ok_or_else(|| anyhow!("strategy '{}' needs classifier logits, but the bank has logits=0", params.method.as_str()))?;
    let probs = softmax_rows(logits)?;
    let x = &bank.features;
    let spec = || SamplingSpec::new(params.ratio, bank.num_classes, x.rows());
    let labels = match params.method {
        LabelMethod::Naive => naive_labels(&probs),
        LabelMethod::Mono => mono_strategy(x, &probs, params.rounds)?.1,
        LabelMethod::Bp => bp_prototypes(x, &probs, &spec()?, params.rounds)?.1,
        LabelMethod::Bmp | LabelMethod::BmdStatic => {
            let kcfg = KMeansConfig::new(params.prototypes)
                .with_seed(params.seed)
                .with_init(KMeansInit::KMeansPlusPlus);
            bmp_prototypes(x, &probs, &spec()?, &kcfg, params.rounds)?.1
        }
    };
    Ok(labels)
}

/// `index,hard_label,p0,...,p{K-1}` with one row per instance.
pub fn format_label_csv(labels: &LabelBank, num_classes: usize) -> String {
    let mut out = String::from("index,hard_label");
    for k in 0..num_classes {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for (i, &y) in labels.hard_labels.iter().enumerate() {
        let _ = write!(out, "{i},{y}");
        if let Some(soft) = &labels.soft_labels {
            for v in soft.row(i) {
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_log(dir: &Path, name: &str, lines: &[String]) -> Result<()> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut text = format!("unix_time={stamp}\n");
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_file(&dir.join(name), &text)
}

pub struct LabelOutcome {
    pub path: PathBuf,
    /// Agreement with the bank's label column, when it has one.
    pub accuracy: Option<f64>,
}

pub fn cmd_label(input: &Path, params: &LabelParams, out_dir: &Path) -> Result<LabelOutcome> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let bank = parse_feature_bank(&text).with_context(|| format!("{}", input.display()))?;
    let labels = label_feature_bank(&bank, params)?;
    let accuracy = bank
        .labels
        .clone()
        .map(|y| pseudo_label_accuracy(&labels, &HeldOutLabels::new(y)))
        .transpose()?;
    prepare_out(out_dir)?;
    let path = out_dir.join("labels.csv");
    write_file(&path, &format_label_csv(&labels, bank.num_classes))?;
    Ok(LabelOutcome { path, accuracy })
}

#[derive(Serialize)]
struct RunOutput<'a> {
    seed: u64,
    config: &'a RunConfigFile,
    source_metrics: &'a MetricsReport,
    run: &'a RunRecord,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_curves_csv(record: &RunRecord) -> String {
    let mut out = String::from("epoch,pseudo_label_accuracy,predicted_accuracy,mean_loss\n");
    for e in &record.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e.epoch,
            opt(e.pseudo_label_accuracy),
            opt(e.predicted_accuracy),
            e.mean_loss
        );
    }
    out
}

/// Benchmark data for `seed`, source training and one adaptation run.
/// Writes `run.json`, `curves.csv` and `run.log`.
pub fn cmd_run(cfg: &RunConfigFile, seed: u64, strategy: Option<Strategy>, out_dir: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    if let Some(s) = strategy {
        cfg.experiment.adaptation.strategy = s;
    }
    let strategy = cfg.experiment.adaptation.strategy;
    let task = prepare_task(&cfg.experiment, seed)?;
    let record = run_strategy(&task, &cfg.experiment.adaptation, strategy)?;
    let output = RunOutput {
        seed,
        config: &cfg,
        source_metrics: &task.source_metrics,
        run: &record,
    };
    prepare_out(out_dir)?;
    write_file(&out_dir.join("run.json"), &(serde_json::to_string_pretty(&output)? + "\n"))?;
    write_file(&out_dir.join("curves.csv"), &format_curves_csv(&record))?;
    write_log(
        out_dir,
        "run.log",
        &[
            format!("command=run strategy={strategy} seed={seed}"),
            format!("adapt_seconds={:.3}", record.wall_time_secs),
            format!("total_seconds={:.3}", start.elapsed().as_secs_f64()),
        ],
    )?;
    Ok(record)
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    config: &'a RunConfigFile,
    table: &'a AblationTable,
}

pub fn format_ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from("strategy,accuracy_mean,accuracy_std,cv_mean,epoch0_pseudo_accuracy_mean\n");
    for r in std::iter::once(&table.source).chain(&table.rows) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.name,
            r.accuracy_mean,
            r.accuracy_std,
            r.cv_mean,
            opt(r.epoch0_pseudo_accuracy_mean)
        );
    }
    out
}

/// Seeds `seed, seed+1, …` (count from `seeds` or the config).
pub fn ablation_seeds(cfg: &RunConfigFile, seed: u64, seeds: Option<usize>) -> Result<Vec<u64>> {
    let count = seeds.unwrap_or(cfg.seeds);
    if count == 0 {
        bail!("--seeds must be >= 1");
    }
    Ok((0..count as u64).map(|i| seed.wrapping_add(i)).collect())
}

/// All configured strategies over a seed range. Writes `ablation.json`,
/// `ablation.csv` and `ablate.log`.
pub fn cmd_ablate(cfg: &RunConfigFile, seed: u64, seeds: Option<usize>, out_dir: &Path) -> Result<AblationTable> {
    let start = Instant::now();
    let seed_list = ablation_seeds(cfg, seed, seeds)?;
    let table = ablation_suite(&cfg.experiment, &cfg.strategies, &seed_list)?;
    prepare_out(out_dir)?;
    let output = AblationOutput { config: cfg, table: &table };
    write_file(&out_dir.join("ablation.json"), &(serde_json::to_string_pretty(&output)? + "\n"))?;
    write_file(&out_dir.join("ablation.csv"), &format_ablation_csv(&table))?;
    write_log(
        out_dir,
        "ablate.log",
        &[
            format!("command=ablate seeds={}", seed_list.len()),
            format!("total_seconds={:.3}", start.elapsed().as_secs_f64()),
        ],
    )?;
    Ok(table)
}

/// Target-domain bank as seen by the trained source model: extracted
/// features, logits, and the ground-truth label column for evaluation.
pub fn generate_target_bank(cfg: &RunConfigFile, seed: u64) -> Result<FeatureBank> {
    let task = prepare_task(&cfg.experiment, seed)?;
    let model = &task.source_model;
    let (features, _) = forward(model, &task.pair.target)?;
    let logits = bmd_core::objectives::logits(model, &task.pair.target)?;
    Ok(FeatureBank {
        num_classes: model.num_classes(),
        features,
        logits: Some(logits),
        labels: Some(task.pair.target_truth.clone().into_export()),
    })
}

pub fn cmd_gen_data(cfg: &RunConfigFile, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let bank = generate_target_bank(cfg, seed)?;
    prepare_out(out_dir)?;
    let path = out_dir.join("target_bank.csv");
    write_file(&path, &write_feature_bank(&bank))?;
    Ok(path)
}

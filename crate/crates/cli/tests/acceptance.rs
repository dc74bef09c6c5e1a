//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p bmd-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use bmd_core::benchmark::BenchmarkProfile;
use bmd_core::clustering::{kmeans, KMeansConfig, KMeansInit};
use bmd_core::dynamic::{DynamicPrototypeState, PrototypeEstimate};
use bmd_core::engine::{ablation_suite, AdaptationConfig, ExperimentConfig, Strategy};
use bmd_core::labeling::{bmp_prototypes, bp_prototypes, top_m_select, PrototypeBank, SamplingSpec};
use bmd_core::metrics::{compute_metrics, HeldOutLabels};
use bmd_core::numerics::{l2_norm, softmax_rows, squared_distance, Matrix, SeededRng};
use bmd_core::objectives::{combined_loss, gradients, Activation, LossWeights, SoftmaxLinearModel};

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn check(id: &'static str, name: &'static str, f: impl FnOnce() -> Result<(bool, String), String>) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        id,
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, std)).collect()).unwrap()
}

// Per-class VisDA-C accuracies (percent) for a SHOT baseline and the same
// baseline with the balanced labeling.
const SHOT_ROW: [f64; 12] = [94.3, 88.5, 80.1, 57.3, 93.1, 94.9, 80.7, 80.3, 91.5, 89.1, 86.3, 58.2];
const SHOT_BMD_ROW: [f64; 12] = [96.2, 87.8, 81.4, 61.7, 95.0, 97.5, 87.9, 82.9, 92.6, 88.8, 87.4, 70.8];

/// Builds 1000 instances per class with exactly `acc·10` correct, so the
/// per-class accuracies reproduce the row exactly.
fn metrics_for_row(row: &[f64]) -> Result<(f64, f64, f64), String> {
    let k = row.len();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (class, &acc) in row.iter().enumerate() {
        let correct = (acc * 10.0).round() as usize;
        for i in 0..1000 {
            truth.push(class);
            pred.push(if i < correct { class } else { (class + 1) % k });
        }
    }
    let m = compute_metrics(&pred, &HeldOutLabels::new(truth), k).map_err(e)?;
    Ok((m.acc_mean * 100.0, m.acc_std * 100.0, m.coefficient_of_variation))
}

fn metric_row(row: &[f64], expected: (f64, f64, f64)) -> Result<(bool, String), String> {
    let start = Instant::now();
    let (mu, sigma, cv) = metrics_for_row(row)?;
    let fast = start.elapsed() < Duration::from_secs(1);
    let ok = (mu - expected.0).abs() <= 0.05 && (sigma - expected.1).abs() <= 0.01 && (cv - expected.2).abs() <= 0.001 && fast;
    Ok((
        ok,
        format!(
            "mu={mu:.3} sigma={sigma:.3} cv={cv:.4} (expected {} / {} / {})",
            expected.0, expected.1, expected.2
        ),
    ))
}

fn reduction_oracle() -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(2);
    let instances = 150;
    let mut mismatches = 0;
    let mut both_failed = 0;
    for t in 0..instances {
        let n = 2 + rng.index(499);
        let d = 1 + rng.index(16);
        let k = 1 + rng.index(8);
        let features = random_matrix(&mut rng, n, d, 1.0);
        let logits = random_matrix(&mut rng, n, k, 2.0);
        let probs = softmax_rows(&logits).map_err(e)?;
        let ratio = [0.5, 1.0, 3.0, 10.0][rng.index(4)];
        let rounds = rng.index(4);
        let spec = SamplingSpec::new(ratio, k, n).map_err(e)?;
        let kcfg = KMeansConfig::new(1).with_seed(t as u64).with_init(KMeansInit::KMeansPlusPlus);
        let bp = bp_prototypes(&features, &probs, &spec, rounds).map(|(_, l)| l.hard_labels);
        let bmp = bmp_prototypes(&features, &probs, &spec, &kcfg, rounds).map(|(_, l)| l.hard_labels);
        match (bp, bmp) {
            (Ok(a), Ok(b)) if a == b => {}
            // d = 1 can cancel every prototype to zero; both must then refuse
            (Err(a), Err(b)) if a.to_string() == b.to_string() => both_failed += 1,
            _ => mismatches += 1,
        }
    }
    Ok((
        mismatches == 0,
        format!("{instances} instances ({both_failed} rejected by both), {mismatches} mismatches"),
    ))
}

fn sort_oracle(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m.min(scores.len()));
    idx
}

fn selection_oracle() -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(3);
    let vectors = 1200;
    let mut mismatches = 0;
    let mut tie_vectors = 0;
    for t in 0..vectors {
        let n = rng.index(2001);
        let ties = t % 3 == 0;
        let levels = 1 + rng.index(5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if ties { rng.index(levels) as f64 / levels as f64 } else { rng.normal(0.0, 1.0) })
            .collect();
        if ties && n > levels {
            tie_vectors += 1;
        }
        let m = rng.index(n + 2);
        if top_m_select(&scores, m) != sort_oracle(&scores, m) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{vectors} vectors ({tie_vectors} with ties), {mismatches} mismatches")))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = l2_norm(a).max(l2_norm(b));
    if scale == 0.0 {
        return l2_norm(&diff);
    }
    l2_norm(&diff) / scale
}

fn numeric_gradient(
    model: &SoftmaxLinearModel,
    x: &Matrix,
    y: &[usize],
    q: &Matrix,
    w: &LossWeights,
) -> Result<(Vec<f64>, Vec<f64>), String> {
    let h = 1e-5;
    let loss = |m: &SoftmaxLinearModel| combined_loss(m, x, y, Some(q), w).map_err(e);
    let (rows, cols) = model.extractor_weights.shape();
    let mut gw = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let base = model.extractor_weights.get(r, c);
            let mut plus = model.clone();
            plus.extractor_weights.set(r, c, base + h);
            let mut minus = model.clone();
            minus.extractor_weights.set(r, c, base - h);
            gw.push((loss(&plus)? - loss(&minus)?) / (2.0 * h));
        }
    }
    let mut gb = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut plus = model.clone();
        plus.extractor_bias[r] += h;
        let mut minus = model.clone();
        minus.extractor_bias[r] -= h;
        gb.push((loss(&plus)? - loss(&minus)?) / (2.0 * h));
    }
    Ok((gw, gb))
}

fn gradient_check() -> Result<(bool, String), String> {
    let start = Instant::now();
    let mut rng = SeededRng::new(4);
    let models = 24;
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for t in 0..models {
        let input_dim = 1 + rng.index(8);
        let feature_dim = 1 + rng.index(6);
        let k = 2 + rng.index(3);
        let b = 1 + rng.index(8);
        let activation = if t % 2 == 0 { Activation::Tanh } else { Activation::Identity };
        let mut init_rng = rng.derive(t as u64);
        let mut model = SoftmaxLinearModel::init(input_dim, feature_dim, k, activation, &mut init_rng);
        model.extractor_bias = (0..feature_dim).map(|_| rng.normal(0.0, 0.3)).collect();
        let x = random_matrix(&mut rng, b, input_dim, 1.0);
        let y: Vec<usize> = (0..b).map(|_| rng.index(k)).collect();
        let q = softmax_rows(&random_matrix(&mut rng, b, k, 1.0)).map_err(e)?;
        let mut weights = vec![(2.0, 0.5)];
        weights.extend((0..10).map(|_| (rng.uniform() * 3.0, rng.uniform() * 3.0)));
        for (alpha, beta) in weights {
            let w = LossWeights::new(alpha, beta).map_err(e)?;
            let analytic = gradients(&model, &x, &y, Some(&q), &w).map_err(e)?;
            let (gw, gb) = numeric_gradient(&model, &x, &y, &q, &w)?;
            worst = worst.max(relative_error(analytic.weights.as_slice(), &gw));
            worst = worst.max(relative_error(&analytic.bias, &gb));
            checks += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 1e-4 && secs < 10.0,
        format!("{models} models, {checks} (alpha, beta) pairs, max relative error {worst:.2e}, {secs:.2}s"),
    ))
}

fn kmeans_invariants() -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(5);
    let instances = 240;
    let mut failures = Vec::new();
    for t in 0..instances {
        let d = 1 + rng.index(6);
        let s = 1 + rng.index(6);
        // a third of the instances have fewer distinct points than clusters
        let distinct = if t % 3 == 0 { 1 + rng.index(s) } else { s + rng.index(40) };
        let base = random_matrix(&mut rng, distinct, d, 2.0);
        let n = distinct + rng.index(20);
        let picks: Vec<usize> = (0..n).map(|i| if i < distinct { i } else { rng.index(distinct) }).collect();
        let points = base.select_rows(&picks);
        let init = if t % 2 == 0 { KMeansInit::KMeansPlusPlus } else { KMeansInit::FirstPoints };
        let cfg = KMeansConfig::new(s).with_seed(t as u64).with_init(init);
        let res = kmeans(&points, &cfg).map_err(e)?;

        let h = &res.inertia_history;
        if h.windows(2).any(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1.0)) {
            failures.push(format!("#{t}: inertia increased {h:?}"));
        }
        if res.centroids.rows() != s {
            failures.push(format!("#{t}: {} centroids for S={s}", res.centroids.rows()));
            continue;
        }
        for j in 0..s {
            let used = res.assignments.contains(&j);
            let duplicated = (0..s).any(|o| o != j && squared_distance(res.centroids.row(o), res.centroids.row(j)) == 0.0);
            if !used && !duplicated {
                failures.push(format!("#{t}: centroid {j} empty and not duplicated"));
            }
        }

        let one = kmeans(&points, &KMeansConfig::new(1).with_seed(t as u64).with_init(init)).map_err(e)?;
        let mean = points.row_mean().map_err(e)?;
        let gap = one.centroids.row(0).iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-9 {
            failures.push(format!("#{t}: S=1 centroid off the mean by {gap:e}"));
        }
    }
    let detail = match failures.first() {
        None => format!("{instances} instances"),
        Some(f) => format!("{instances} instances, {} failures, first {f}", failures.len()),
    };
    Ok((failures.is_empty(), detail))
}

fn ema_law() -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(6);
    let (k, s, d) = (3, 2, 5);
    let mut worst: f64 = 0.0;
    let lambdas = [0.995, 0.999, 0.9999];
    for &lambda in &lambdas {
        let start = random_matrix(&mut rng, k * s, d, 1.0);
        let target = random_matrix(&mut rng, k * s, d, 1.0);
        let bank = PrototypeBank::new(start.clone(), k, s, false).map_err(e)?;
        let mut state = DynamicPrototypeState::new(bank, lambda).map_err(e)?.without_renormalization();
        let estimate = PrototypeEstimate {
            prototypes: target.clone(),
            updated: vec![true; k * s],
        };
        let gaps0: Vec<f64> = (0..k * s).map(|r| squared_distance(start.row(r), target.row(r)).sqrt()).collect();
        for step in 1..=1000 {
            state.ema_update(&estimate).map_err(e)?;
            let current = state.bank().as_matrix();
            let factor = lambda.powi(step);
            for r in 0..k * s {
                let gap = squared_distance(current.row(r), target.row(r)).sqrt();
                let expected = factor * gaps0[r];
                worst = worst.max((gap - expected).abs() / expected);
            }
        }
    }
    Ok((worst < 1e-9, format!("lambda in {lambdas:?}, 1000 steps, max relative error {worst:.2e}")))
}

fn balance_claim() -> Result<Vec<Outcome>, String> {
    let start = Instant::now();
    let exp = ExperimentConfig::default();
    let seeds: Vec<u64> = (0..10).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(e)?;
    let table = pool.install(|| ablation_suite(&exp, &Strategy::ALL, &seeds)).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let row = |s: Strategy| table.row(s).ok_or_else(|| format!("missing row {s}"));
    let (naive, mono, bp, bmp, bmd) = (
        row(Strategy::Naive)?,
        row(Strategy::Mono)?,
        row(Strategy::Bp)?,
        row(Strategy::Bmp)?,
        row(Strategy::Bmd)?,
    );
    let hard = exp.benchmark.hard_class.ok_or("profile has no hard class")?;
    let hard_acc = |r: &bmd_core::engine::AblationRow| r.epoch0_pseudo_class_accuracy_mean.get(hard).copied().flatten();
    let (naive_hard, bp_hard) = (
        hard_acc(naive).ok_or("no naive epoch-0 hard-class accuracy")?,
        hard_acc(bp).ok_or("no BP epoch-0 hard-class accuracy")?,
    );
    let fast = secs < 300.0;
    let timing = format!("{} seeds, {secs:.1}s on one thread", seeds.len());
    Ok(vec![
        Outcome {
            id: "7a",
            name: "hard-class epoch-0 pseudo-label gain of BP over naive",
            pass: bp_hard - naive_hard >= 0.05 && fast,
            detail: format!("bp={:.2}% naive={:.2}% ({timing})", bp_hard * 100.0, naive_hard * 100.0),
            elapsed: start.elapsed(),
        },
        Outcome {
            id: "7b",
            name: "final c_v of BMD below mono",
            pass: bmd.cv_mean < mono.cv_mean && fast,
            detail: format!("bmd={:.4} mono={:.4}", bmd.cv_mean, mono.cv_mean),
            elapsed: Duration::ZERO,
        },
        Outcome {
            id: "7c",
            name: "final accuracy ordering BMD >= BMP >= BP >= mono",
            pass: bmd.accuracy_mean >= bmp.accuracy_mean
                && bmp.accuracy_mean >= bp.accuracy_mean
                && bp.accuracy_mean >= mono.accuracy_mean
                && fast,
            detail: format!(
                "bmd={:.2}% bmp={:.2}% bp={:.2}% mono={:.2}%",
                bmd.accuracy_mean * 100.0,
                bmp.accuracy_mean * 100.0,
                bp.accuracy_mean * 100.0,
                mono.accuracy_mean * 100.0
            ),
            elapsed: Duration::ZERO,
        },
    ])
}

const SMALL_CONFIG: &str = "seeds = 2\nstrategies = [\"naive\", \"bp\", \"bmd\"]\n[benchmark]\nsource_per_class = 60\ntarget_per_class = 40\n[source]\nepochs = 10\n[adaptation]\nepochs = 3\n";

fn bmd(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bmd"))
        .args(args)
        .env("BMD_THREADS", "2")
        .output()
        .map_err(e)?;
    if !out.status.success() {
        return Err(format!("bmd {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(())
}

fn data_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(e)? {
        let path = entry.map_err(e)?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".csv") || name.ends_with(".json") {
            files.push((name, fs::read(&path).map_err(e)?));
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Result<(bool, String), String> {
    let tmp = tempfile::tempdir().map_err(e)?;
    let root = tmp.path();
    let config = root.join("small.toml");
    fs::write(&config, SMALL_CONFIG).map_err(e)?;
    let config = config.to_str().unwrap().to_string();
    let bank = root.join("bank");
    bmd(&["gen-data", "--config", &config, "--seed", "3", "--out", bank.to_str().unwrap()])?;
    let bank_file = bank.join("target_bank.csv").to_str().unwrap().to_string();

    let commands: Vec<(&str, Vec<String>)> = vec![
        ("label", vec!["label".into(), bank_file.clone(), "--strategy".into(), "bmd-static".into(), "--seed".into(), "9".into()]),
        ("run", vec!["run".into(), "--config".into(), config.clone(), "--seed".into(), "4".into()]),
        ("ablate", vec!["ablate".into(), "--config".into(), config.clone(), "--seed".into(), "1".into()]),
        ("gen-data", vec!["gen-data".into(), "--config".into(), config.clone(), "--seed".into(), "5".into()]),
    ];
    let mut differing = Vec::new();
    let mut compared = 0;
    for (name, args) in &commands {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = root.join(format!("{name}-{rep}"));
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            let out_str = out.to_str().unwrap().to_string();
            full.extend(["--out", &out_str]);
            bmd(&full)?;
            outputs.push(data_files(&out)?);
        }
        if outputs[0].is_empty() {
            return Err(format!("{name} wrote no data files"));
        }
        compared += outputs[0].len();
        if outputs[0] != outputs[1] {
            differing.push(*name);
        }
    }
    let detail = if differing.is_empty() {
        format!("label, run, ablate, gen-data repeated; {compared} data files byte-identical")
    } else {
        format!("outputs differ for {differing:?}")
    };
    Ok((differing.is_empty(), detail))
}

fn separable_sanity() -> Result<(bool, String), String> {
    let exp = ExperimentConfig {
        benchmark: BenchmarkProfile::separable(),
        adaptation: AdaptationConfig {
            epochs: 10,
            ..AdaptationConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let seeds: Vec<u64> = (0..5).collect();
    let table = ablation_suite(&exp, &Strategy::ALL, &seeds).map_err(e)?;
    let mut problems = Vec::new();
    if table.source.per_seed_accuracy.iter().any(|&a| a != 1.0) {
        problems.push(format!("source accuracy {:?}", table.source.per_seed_accuracy));
    }
    for s in [Strategy::Bp, Strategy::Bmp] {
        let r = table.row(s).ok_or("missing row")?;
        if r.epoch0_pseudo_accuracy_mean != Some(1.0) {
            problems.push(format!("{s} epoch-0 pseudo accuracy {:?}", r.epoch0_pseudo_accuracy_mean));
        }
    }
    for r in &table.rows {
        if r.per_seed_accuracy.iter().any(|&a| a != 1.0) {
            problems.push(format!("{} final accuracy {:?}", r.name, r.per_seed_accuracy));
        }
    }
    let detail = if problems.is_empty() {
        format!("{} seeds: BP/BMP epoch-0 pseudo accuracy 100%, all strategies end at 100%", seeds.len())
    } else {
        problems.join("; ")
    };
    Ok((problems.is_empty(), detail))
}

fn main() -> ExitCode {
    let mut outcomes = vec![
        check("1a", "class-balance metrics, SHOT row", || metric_row(&SHOT_ROW, (82.9, 12.857, 0.155))),
        check("1b", "class-balance metrics, SHOT w/ BMD row", || metric_row(&SHOT_BMD_ROW, (85.8, 10.127, 0.118))),
        check("2", "BMP with S=1 reproduces BP hard labels", reduction_oracle),
        check("3", "top-M selection matches full sort", selection_oracle),
        check("4", "analytic gradients match finite differences", gradient_check),
        check("5", "k-means invariants", kmeans_invariants),
        check("6", "EMA gap decays by lambda per step", ema_law),
    ];
    match balance_claim() {
        Ok(rows) => outcomes.extend(rows),
        Err(err) => outcomes.push(Outcome {
            id: "7",
            name: "hard-truck balance claim",
            pass: false,
            detail: format!("error: {err}"),
            elapsed: Duration::ZERO,
        }),
    }
    outcomes.push(check("8", "CLI outputs are byte-identical on repeat", determinism));
    outcomes.push(check("9", "separable domains stay at 100%", separable_sanity));

    for o in &outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{}] {}: {} ({:.2}s)", o.id, o.name, o.detail, o.elapsed.as_secs_f64());
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

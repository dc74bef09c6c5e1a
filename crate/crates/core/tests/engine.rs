use bmd_core::benchmark::{generate_domain_pair, BenchmarkProfile, LabeledSet};
use bmd_core::engine::*;
use bmd_core::labeling::naive_labels;
use bmd_core::metrics::HeldOutLabels;
use bmd_core::numerics::{argmax, Matrix, SeededRng};
use bmd_core::objectives::{forward, gradients, Activation, SoftmaxLinearModel};

fn small_task(seed: u64, n_per_class: usize) -> (SoftmaxLinearModel, Matrix, HeldOutLabels) {
    small_task_with(seed, n_per_class, Some(3))
}

fn small_task_with(seed: u64, n_per_class: usize, hard_class: Option<usize>) -> (SoftmaxLinearModel, Matrix, HeldOutLabels) {
    let profile = BenchmarkProfile {
        num_classes: 4,
        raw_dim: 6,
        source_per_class: 60,
        target_per_class: n_per_class,
        hard_class,
        hard_shift_toward: hard_class.map(|_| 0),
        ..BenchmarkProfile::hard_truck()
    };
    let pair = generate_domain_pair(&profile.to_spec(seed).unwrap()).unwrap();
    let cfg = SourceConfig {
        feature_dim: 5,
        epochs: 10,
        ..SourceConfig::default()
    };
    let model = init_and_train_source(&pair.source, 4, &cfg).unwrap();
    (model, pair.target, pair.target_truth)
}

fn quick(strategy: Strategy) -> AdaptationConfig {
    AdaptationConfig {
        strategy,
        epochs: 4,
        batch_size: 16,
        seed: 7,
        ..AdaptationConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_model_and_curves_fixed() {
    let (model, x, truth) = small_task(1, 40);
    for s in Strategy::ALL {
        let cfg = AdaptationConfig {
            learning_rate: 0.0,
            ..quick(s)
        };
        let (adapted, rec) = adapt(model.clone(), &x, &cfg, Some(&truth)).unwrap();
        assert_eq!(adapted, model, "{s}");
        assert_eq!(rec.epochs.len(), 4);
        let first = rec.epochs[0].pseudo_label_accuracy;
        for e in &rec.epochs {
            assert_eq!(e.predicted_accuracy, rec.epochs[0].predicted_accuracy);
            if s != Strategy::Bmp && s != Strategy::Bmd {
                assert_eq!(e.pseudo_label_accuracy, first, "{s}");
            }
        }
        assert_eq!(rec.final_metrics, rec.initial_metrics);
    }
}

#[test]
fn bmd_without_dynamic_weight_matches_bmp() {
    let (model, x, truth) = small_task(2, 40);
    let bmp = AdaptationConfig { beta: 0.0, ..quick(Strategy::Bmp) };
    let bmd = AdaptationConfig { beta: 0.0, ..quick(Strategy::Bmd) };
    let (m1, r1) = adapt(model.clone(), &x, &bmp, Some(&truth)).unwrap();
    let (m2, r2) = adapt(model, &x, &bmd, Some(&truth)).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1.epochs, r2.epochs);
    assert_eq!(r1.final_predictions, r2.final_predictions);
}

#[test]
fn dynamic_weight_changes_the_trajectory() {
    let (model, x, _) = small_task(2, 40);
    let (m1, _) = adapt(model.clone(), &x, &quick(Strategy::Bmp), None).unwrap();
    let (m2, _) = adapt(model, &x, &quick(Strategy::Bmd), None).unwrap();
    assert_ne!(m1, m2);
}

/// Self-training with argmax labels, written out step by step.
fn reference_naive_loop(mut model: SoftmaxLinearModel, x: &Matrix, cfg: &AdaptationConfig) -> SoftmaxLinearModel {
    let weights = cfg.loss_weights();
    let d = model.feature_dim();
    let mut vw = vec![0.0; d * model.input_dim()];
    let mut vb = vec![0.0; d];
    for epoch in 0..cfg.epochs {
        let (_, probs) = forward(&model, x).unwrap();
        let labels: Vec<usize> = probs.iter_rows().map(argmax).collect();
        let order = SeededRng::new(cfg.seed).derive(epoch as u64).permutation(x.rows());
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = gradients(&model, &xb, &yb, None, &weights).unwrap();
            let mut w = model.extractor_weights.clone().into_vec();
            for ((p, v), gi) in w.iter_mut().zip(vw.iter_mut()).zip(g.weights.as_slice()) {
                *v = cfg.sgd_momentum * *v + gi;
                *p -= cfg.learning_rate * *v;
            }
            model.extractor_weights = Matrix::from_vec(d, model.input_dim(), w).unwrap();
            for ((p, v), gi) in model.extractor_bias.iter_mut().zip(vb.iter_mut()).zip(&g.bias) {
                *v = cfg.sgd_momentum * *v + gi;
                *p -= cfg.learning_rate * *v;
            }
        }
    }
    model
}

#[test]
fn naive_strategy_matches_reference_loop() {
    let (model, x, _) = small_task_with(3, 50, None);
    assert_eq!(x.rows(), 200);
    let cfg = AdaptationConfig {
        beta: 0.7,
        ..quick(Strategy::Naive)
    };
    let (adapted, rec) = adapt(model.clone(), &x, &cfg, None).unwrap();
    let reference = reference_naive_loop(model.clone(), &x, &cfg);
    assert_eq!(adapted, reference);
    assert!(rec.epochs.iter().all(|e| e.pseudo_label_accuracy.is_none()));
    assert_ne!(adapted, model);
}

#[test]
fn naive_labels_are_model_argmax() {
    let (model, x, _) = small_task(3, 20);
    let (_, probs) = forward(&model, &x).unwrap();
    assert_eq!(naive_labels(&probs).hard_labels, predict(&model, &x).unwrap());
}

#[test]
fn classifier_is_never_modified() {
    let (model, x, truth) = small_task(5, 40);
    for s in Strategy::ALL {
        let (adapted, _) = adapt(model.clone(), &x, &quick(s), Some(&truth)).unwrap();
        assert_eq!(adapted.classifier(), model.classifier(), "{s}");
        assert_ne!(adapted.extractor_weights, model.extractor_weights, "{s}");
    }
}

#[test]
fn runs_are_deterministic() {
    let (model, x, truth) = small_task(6, 40);
    for s in Strategy::ALL {
        let (m1, r1) = adapt(model.clone(), &x, &quick(s), Some(&truth)).unwrap();
        let (m2, r2) = adapt(model.clone(), &x, &quick(s), Some(&truth)).unwrap();
        assert_eq!(m1, m2);
        assert!(r1.same_results(&r2));
    }
}

#[test]
fn curve_lengths_match_epochs() {
    let (model, x, truth) = small_task(7, 30);
    for epochs in [0, 1, 3] {
        let cfg = AdaptationConfig { epochs, ..quick(Strategy::Bmd) };
        let (_, rec) = adapt(model.clone(), &x, &cfg, Some(&truth)).unwrap();
        assert_eq!(rec.epochs.len(), epochs);
        assert!(rec.epochs.iter().all(|e| e.pseudo_label_class_accuracy.len() == 4));
        if epochs == 0 {
            assert_eq!(rec.final_metrics, rec.initial_metrics);
        }
    }
}

#[test]
fn adapt_rejects_bad_inputs() {
    let (model, x, truth) = small_task(8, 30);
    let short = truth.select(&[0, 1, 2]);
    assert!(adapt(model.clone(), &x, &quick(Strategy::Bp), Some(&short)).is_err());
    let wrong_dim = Matrix::zeros(5, 3);
    assert!(adapt(model.clone(), &wrong_dim, &quick(Strategy::Bp), None).is_err());
    let bad = AdaptationConfig { batch_size: 0, ..quick(Strategy::Bp) };
    assert!(adapt(model, &x, &bad, None).is_err());
}

fn separable_two_class(seed: u64) -> LabeledSet {
    let profile = BenchmarkProfile {
        num_classes: 2,
        raw_dim: 4,
        ..BenchmarkProfile::separable()
    };
    generate_domain_pair(&profile.to_spec(seed).unwrap()).unwrap().source
}

fn source_accuracy(model: &SoftmaxLinearModel, data: &LabeledSet) -> f64 {
    let pred = predict(model, &data.inputs).unwrap();
    pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

#[test]
fn source_training_fits_separable_data() {
    for seed in 0..5 {
        let data = separable_two_class(seed);
        let model = init_and_train_source(&data, 2, &SourceConfig { seed, ..SourceConfig::default() }).unwrap();
        assert!(source_accuracy(&model, &data) >= 0.99, "seed {seed}");
    }
}

#[test]
fn source_training_edge_cases() {
    let data = separable_two_class(1);
    let mut rng = SeededRng::new(2);
    let model = SoftmaxLinearModel::init(4, 3, 2, Activation::Tanh, &mut rng);
    let zero = SourceConfig { epochs: 0, ..SourceConfig::default() };
    assert_eq!(train_source(model.clone(), &data, &zero).unwrap(), model);
    let cfg = SourceConfig::default();
    assert_eq!(train_source(model.clone(), &data, &cfg).unwrap(), train_source(model.clone(), &data, &cfg).unwrap());
    let empty = LabeledSet { inputs: Matrix::zeros(0, 4), labels: vec![] };
    assert!(train_source(model, &empty, &cfg).is_err());
}

fn small_experiment(profile: BenchmarkProfile) -> ExperimentConfig {
    ExperimentConfig {
        benchmark: profile,
        source: SourceConfig::default(),
        adaptation: AdaptationConfig {
            epochs: 5,
            ..AdaptationConfig::default()
        },
    }
}

#[test]
fn zero_shift_strategies_stay_near_source() {
    let exp = small_experiment(BenchmarkProfile::zero_shift());
    let table = ablation_suite(&exp, &Strategy::ALL, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(table.rows.len(), 5);
    for row in &table.rows {
        assert!((row.accuracy_mean - table.source.accuracy_mean).abs() <= 0.01, "{}: {} vs {}", row.name, row.accuracy_mean, table.source.accuracy_mean);
    }
}

#[test]
fn ablation_is_reproducible_and_ordered() {
    let exp = small_experiment(BenchmarkProfile::hard_truck());
    let order = [Strategy::Bmd, Strategy::Naive, Strategy::Bp];
    let a = ablation_suite(&exp, &order, &[3, 4]).unwrap();
    let b = ablation_suite(&exp, &order, &[3, 4]).unwrap();
    assert_eq!(a, b);
    let names: Vec<&str> = a.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["bmd", "naive", "bp"]);
    assert_eq!(a.rows[0].per_seed_accuracy.len(), 2);
    let single = ablation_suite(&exp, &order, &[3]).unwrap();
    assert_eq!(single.rows[0].accuracy_std, 0.0);
    assert_eq!(single.rows[0].per_seed_accuracy[0], a.rows[0].per_seed_accuracy[0]);
}

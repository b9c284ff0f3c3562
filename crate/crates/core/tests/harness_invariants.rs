//! End-to-end properties of the experiment harness: the confounder knob
//! actually controls dependence, a small experiment runs to completion and
//! reruns byte-identically, and cell failures are reported without sinking
//! the run.

use cdlab::harness::{
    generate_synthetic, run_experiment, DataSource, DatasetSpec, ExperimentConfig,
    SyntheticFactors,
};
use cdlab::metrics::{distance_correlation, SignalBatch, SignalKind};

/// One-hot label rows next to 1-dim background rows for the whole
/// train+val pool of a freshly generated dataset.
fn background_label_dc(rho: f64, seed: u64) -> f64 {
    let spec = DatasetSpec {
        source: DataSource::Synthetic,
        side: 16,
        classes: 4,
        train: 800,
        val: 200,
        test: 8,
        seed,
    };
    let data = generate_synthetic(&spec, &SyntheticFactors { rho }).unwrap();

    let mut bg_rows = Vec::with_capacity(1000);
    let mut label_rows = Vec::with_capacity(1000);
    for (factors, &label) in data
        .train_factors
        .iter()
        .zip(&data.train_y)
        .chain(data.val_factors.iter().zip(&data.val_y))
    {
        bg_rows.push(vec![factors.background]);
        let mut one_hot = vec![0.0; 4];
        one_hot[label] = 1.0;
        label_rows.push(one_hot);
    }
    assert_eq!(bg_rows.len(), 1000);

    let bg = SignalBatch::from_rows(SignalKind::Style, &bg_rows).unwrap();
    let labels = SignalBatch::from_rows(SignalKind::Content, &label_rows).unwrap();
    distance_correlation(&bg, &labels).unwrap()
}

#[test]
fn confounder_strength_controls_background_label_dependence() {
    let decoupled = background_label_dc(0.0, 7);
    assert!(
        decoupled < 0.2,
        "rho=0 background vs label dc should be small, got {decoupled}"
    );
    let tied = background_label_dc(0.9, 7);
    assert!(tied > 0.4, "rho=0.9 background vs label dc should be large, got {tied}");
    assert!(tied > 3.0 * decoupled, "tied {tied} vs decoupled {decoupled}");
}

fn small_config(out_dir: std::path::PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 11;
    cfg.dataset.classes = 2;
    cfg.dataset.train = 64;
    cfg.dataset.val = 16;
    cfg.dataset.test = 32;
    cfg.models.variants = vec!["cama".into(), "caam".into(), "dice".into()];
    cfg.models.epochs = 2;
    cfg.models.tracking = true;
    cfg.models.tracking_samples = 8;
    cfg.attacks.suite = Some(vec!["fgsm_linf".into()]);
    cfg.attacks.eval_samples = 16;
    cfg.metrics.dc_samples = 64;
    cfg.metrics.iob_train = 48;
    cfg.metrics.iob_mode = "tracking".into();
    cfg.output.dir = out_dir;
    cfg
}

#[test]
fn a_small_experiment_completes_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path().join("out"));

    let outcome = run_experiment(&cfg).unwrap();
    assert!(outcome.failures.is_empty(), "failures: {:?}", outcome.failures);
    assert_eq!(outcome.cells.len(), 3);

    for cell in &outcome.cells {
        for v in cell.measurements.values() {
            assert!((0.0..=1.0).contains(&v) && v.is_finite(), "measurement {v}");
        }
        let robust = cell.robustness.as_ref().expect("attacks were configured");
        assert_eq!(robust.per_attack.len(), 1);
        assert_eq!(robust.per_attack[0].label, "fgsm_linf");
        assert_eq!(cell.epoch_log.len(), 2);
        for rec in &cell.epoch_log {
            let m1 = rec.m1.expect("tracking on");
            let adv = rec.adv_acc.expect("tracking on");
            assert!(m1.is_finite() && adv.is_finite());
        }
    }

    // every measurement/target pair is either correlated or explained
    assert_eq!(
        outcome.correlations.len() + outcome.skipped_correlations.len(),
        20,
        "skipped: {:?}",
        outcome.skipped_correlations
    );
    for c in &outcome.correlations {
        assert_eq!(c.n, 3);
        assert!(c.r.abs() <= 1.0 && (0.0..=1.0).contains(&c.p));
    }

    let files = [
        "measurements.csv",
        "robustness.csv",
        "correlations.csv",
        "tracking.csv",
        "experiment.json",
        "cells/synthetic-cama.json",
        "cells/synthetic-caam.json",
        "cells/synthetic-dice.json",
    ];
    let out = &cfg.output.dir;
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();

    let meas = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(meas.lines().count(), 4, "header plus one row per cell:\n{meas}");
    let tracking = String::from_utf8(first[3].clone()).unwrap();
    assert_eq!(tracking.lines().count(), 1 + 2 * 3, "epochs x cells rows:\n{tracking}");
    for line in tracking.lines().skip(1) {
        for field in line.split(',').skip(2) {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite());
        }
    }
    let json: serde_json::Value = serde_json::from_slice(&first[4]).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 3);

    // identical seed, identical bytes
    run_experiment(&cfg).unwrap();
    for (f, before) in files.iter().zip(&first) {
        let after = std::fs::read(out.join(f)).unwrap();
        assert_eq!(&after, before, "{f} changed across identical reruns");
    }
}

#[test]
fn cell_failures_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path().join("out"));
    cfg.models.variants = vec!["caam".into()];
    cfg.models.epochs = 1;
    cfg.models.tracking = false;
    cfg.attacks.eval_samples = 0; // poisons every cell's robustness stage

    let outcome = run_experiment(&cfg).unwrap();
    assert!(outcome.cells.is_empty());
    assert_eq!(outcome.failures.len(), 1);
    let failure = &outcome.failures[0];
    assert_eq!(failure.model, "caam");
    assert_eq!(failure.dataset, "synthetic");
    assert!(failure.error.contains("max_samples"), "error: {}", failure.error);

    // artifacts still land, just empty
    let meas = std::fs::read_to_string(cfg.output.dir.join("measurements.csv")).unwrap();
    assert_eq!(meas, "model,dataset,n,m1,m2,m3,m4,m5\n");
    assert_eq!(outcome.skipped_correlations.len(), 1);
    assert_eq!(outcome.skipped_correlations[0].measurement, "*");
}

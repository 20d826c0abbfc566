use sensireg::baselines::{JacobRegConfig, PgdConfig};
use sensireg::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use sensireg::data::{gen_synthetic, load_idx, write_idx, Synthetic};
use sensireg::harness::{
    emit_report, evaluate, parse_report_csv, parse_sweep_csv, select_lambda_for, sweep_csv, sweep_lambda, train,
    DatasetSource, ExperimentConfig, Regime, ReportRow,
};
use sensireg::metrics::{MetricSelection, METRIC_NAMES};
use sensireg::nsloss::{NsConfig, LAMBDA_PROBES};
use sensireg::Error;
use serde_json::json;

fn blobs() -> ExperimentConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/blobs.json");
    ExperimentConfig::load(path, &[]).unwrap()
}

#[test]
fn idx_files_round_trip_and_feed_the_harness() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&Synthetic::Glyphs, 60, 4).unwrap();
    let (img, lbl) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    write_idx(&data, &img, &lbl).unwrap();
    let back = load_idx(&img, &lbl).unwrap();
    assert_eq!(back, data);

    let source = DatasetSource::Idx {
        train_images: img.clone(),
        train_labels: lbl.clone(),
        test_images: None,
        test_labels: None,
        limit: Some(40),
    };
    let splits = source.load().unwrap();
    assert_eq!((splits.train.len(), splits.test.len()), (40, 12));
    assert_eq!(splits.test.inputs.row(0), data.inputs.row(48));
    assert_eq!(splits.train.sample_shape, vec![1, 28, 28]);

    let half = DatasetSource::Idx {
        train_images: img.clone(),
        train_labels: lbl.clone(),
        test_images: Some(img),
        test_labels: None,
        limit: None,
    };
    assert!(matches!(half.load(), Err(Error::Config(_))));
}

fn same_training(a: &ExperimentConfig, b: &ExperimentConfig) {
    let splits = a.dataset.load().unwrap();
    let x = train(a, &splits).unwrap();
    let y = train(b, &splits).unwrap();
    assert_eq!(encode(&x.model).unwrap(), encode(&y.model).unwrap());
    let ce = |o: &sensireg::harness::TrainOutcome| o.logs.iter().map(|l| l.train_ce.to_bits()).collect::<Vec<_>>();
    assert_eq!(ce(&x), ce(&y));
}

#[test]
fn degenerate_regimes_equal_standard_bit_for_bit() {
    let standard = blobs();
    let ns = ExperimentConfig {
        regime: Regime::Nsloss,
        ns: Some(NsConfig::new(0.1, 0.0)),
        ..standard.clone()
    };
    same_training(&standard, &ns);
    let adv = ExperimentConfig {
        regime: Regime::Advtrain,
        pgd: Some(PgdConfig::new(0.0, 3)),
        ..standard.clone()
    };
    same_training(&standard, &adv);
    let jac = ExperimentConfig {
        regime: Regime::Jacobreg,
        jacobreg: Some(JacobRegConfig::new(0.0)),
        ..standard.clone()
    };
    same_training(&standard, &jac);
}

#[test]
fn blobs_train_quickly_and_nsloss_falls() {
    let cfg = blobs();
    let splits = cfg.dataset.load().unwrap();
    let out = train(&cfg, &splits).unwrap();
    assert_eq!(out.logs.len(), 5);
    assert!(out.logs[4].val_acc >= 0.95, "{}", out.logs[4].val_acc);

    let ns = ExperimentConfig {
        regime: Regime::Nsloss,
        epochs: 10,
        ns: Some(NsConfig::new(0.1, 1.0)),
        ..cfg
    };
    let out = train(&ns, &splits).unwrap();
    let first = out.initial.nsloss.unwrap();
    let last = out.logs[9].nsloss.unwrap();
    assert!(last < first, "{last} vs {first}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let cfg = ExperimentConfig {
        regime: Regime::Nsloss,
        ns: Some(NsConfig::new(0.1, 0.5)),
        ..blobs()
    };
    same_training(&cfg, &cfg);
    let splits = cfg.dataset.load().unwrap();
    let model = train(&cfg, &splits).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.srck");
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), model);
    let bytes = encode(&model).unwrap();
    assert!(decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn fine_tuning_starts_from_the_checkpoint() {
    let cfg = blobs();
    let splits = cfg.dataset.load().unwrap();
    let model = train(&cfg, &splits).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("start.srck");
    save_checkpoint(&model, &path).unwrap();
    let tuned = ExperimentConfig {
        init_checkpoint: Some(path),
        epochs: 1,
        ..cfg
    };
    let out = train(&tuned, &splits).unwrap();
    assert_eq!(out.initial.val_acc, sensireg::harness::accuracy(&model, &splits.test).unwrap());
}

#[test]
fn single_lambda_sweep_gives_one_row() {
    let cfg = ExperimentConfig { epochs: 2, ..blobs() };
    let splits = cfg.dataset.load().unwrap();
    let rows = sweep_lambda(&cfg, &splits, &[0.5]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].lambda, 0.5);
    assert!(rows[0].max_sens.is_some() && rows[0].sparseness.is_some());
    let text = sweep_csv(&rows);
    assert_eq!(text.lines().count(), 2);
    assert_eq!(parse_sweep_csv(&text).unwrap().len(), 1);
    assert!(sweep_lambda(&cfg, &splits, &[]).is_err());
}

#[test]
fn evaluation_and_report_files() {
    let cfg = blobs();
    let splits = cfg.dataset.load().unwrap();
    let model = train(&cfg, &splits).unwrap().model;
    let eval = evaluate(&cfg, &splits, &model, "standard", MetricSelection::ALL).unwrap();
    assert_eq!(eval.report.sample_count(), cfg.eval_samples);
    assert!(eval.robust_acc.unwrap() <= eval.clean_acc);
    let row = ReportRow::from_evaluation("standard", &eval);
    for (slot, name) in METRIC_NAMES.iter().enumerate() {
        assert_eq!(row.metrics[slot], eval.report.mean(name));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    emit_report(&[row.clone()], &path).unwrap();
    let back = parse_report_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].method, "standard");
    assert_eq!(back[0].clean_acc, row.clean_acc);
    assert!(path.with_extension("txt").exists());
}

#[test]
fn lambda_selection_on_pretrained_blobs() {
    let cfg = blobs();
    let splits = cfg.dataset.load().unwrap();
    let model = train(&cfg, &splits).unwrap().model;
    let sel = select_lambda_for(&cfg, &splits, &model).unwrap();
    assert!(sel.nsloss0 > 0.0);
    assert!((sel.lambda0 - 4f64.log2() / sel.nsloss0).abs() <= 1e-12 * sel.lambda0);
    assert_eq!(sel.probes.len(), LAMBDA_PROBES);
    assert_eq!(sel.probes[0].lambda, sel.lambda0);
    let half_decade = 10f64.sqrt();
    assert!(sel.lambda >= sel.lambda0 / half_decade && sel.lambda <= sel.lambda0 * half_decade);
    assert!(sel.probes.iter().any(|p| p.accepted && p.lambda == sel.lambda));
    assert_eq!(select_lambda_for(&cfg, &splits, &model).unwrap(), sel);
}

#[test]
fn config_errors_are_reported() {
    let bad = ExperimentConfig::from_value(json!({
        "dataset": {"source": "synthetic", "generator": {"kind": "two_moons"}, "n_train": 10, "n_test": 5},
        "model": {"kind": "mlp", "hidden": [4]},
        "regime": "standard",
        "epochs": 1,
        "learning_rate": 0.1,
        "bogus": 1
    }));
    assert!(matches!(bad, Err(Error::Config(_))));
    let missing_ns = ExperimentConfig::from_value(json!({
        "dataset": {"source": "synthetic", "generator": {"kind": "two_moons"}, "n_train": 10, "n_test": 5},
        "model": {"kind": "mlp", "hidden": [4]},
        "regime": "nsloss",
        "epochs": 1,
        "learning_rate": 0.1
    }));
    assert!(missing_ns.is_err());
}

use std::f64::consts::PI;

use gatecal::calibration::CalibrationModule;
use gatecal::data::{load_csv, Dataset, Part, SplitRatios};
use gatecal::forecast::{checkpoint_path, evaluate_mse, fit, Forecaster, ForecasterKind, TrainConfig};
use gatecal::tta::{compare_methods, run_tta, AdaptationConfig, Method};
use gatecal::Error;

fn series(rows: usize) -> Dataset {
    let values = (0..rows)
        .flat_map(|t| {
            let x = 2.0 * PI * t as f64 / 24.0;
            let shift = if t > rows * 3 / 4 { 0.5 } else { 0.0 };
            [x.sin() + shift, (x + 0.7).cos() * 2.0 + 10.0, 0.01 * t as f64 + (x * 2.0).sin()]
        })
        .collect();
    Dataset::from_values("ETTm1", vec!["a".into(), "b".into(), "OT".into()], values).unwrap()
}

fn small_train() -> TrainConfig {
    TrainConfig {
        kernel: 7,
        hidden: 8,
        epochs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn csv_to_checkpoint_to_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ETTm1.csv");
    series(900).write_csv(&csv).unwrap();
    let ds = load_csv(&csv, 100).unwrap();
    assert_eq!(ds.name(), "ETTm1");
    assert_eq!(ds.columns(), ["a", "b", "OT"]);
    let ratios = SplitRatios::for_dataset(ds.name());
    let ds = ds.split_and_normalize(ratios).unwrap();
    assert_eq!(ds.split().unwrap().train_end, 540);

    for kind in ForecasterKind::ALL {
        let f = fit(kind, &ds.windows(Part::Train, 48, 24, 1).unwrap(), &small_train()).unwrap();
        let path = checkpoint_path(dir.path(), ds.name(), kind, 48, 24);
        f.save_checkpoint(&path).unwrap();
        let back = Forecaster::load_checkpoint(&path).unwrap();
        assert_eq!(back.checksum(), f.checksum());
        assert!(back.provenance().contains("dataset=ETTm1"));

        let cfg = AdaptationConfig {
            lr: 1e-3,
            ..AdaptationConfig::default()
        };
        let cmp = compare_methods(&ds, &back, &cfg).unwrap();
        let test = ds.windows(Part::Test, 48, 24, 1).unwrap();
        let offline = evaluate_mse(&back, &test).unwrap();
        let frozen = cmp.get(Method::Frozen).unwrap();
        assert!((frozen.mse - offline).abs() < 1e-12, "{kind}");
        for r in &cmp.runs {
            assert!(r.mse.is_finite() && r.backbone_unchanged);
            assert_eq!(r.n_windows, test.len());
            // 540 training rows put the daily tone between bins 22 and 23, round(540 / 23) = 23
            assert_eq!(r.period, 23);
        }
    }
}

#[test]
fn adapted_modules_survive_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let ds = series(700).split_and_normalize(SplitRatios::ETT).unwrap();
    let f = fit(ForecasterKind::Ols, &ds.windows(Part::Train, 48, 24, 1).unwrap(), &small_train()).unwrap();
    let r = run_tta(&ds, &f, &AdaptationConfig::default(), Method::Petsa).unwrap();
    let [input, output] = r.modules.unwrap();
    for (m, name) in [(&input, "in.snap"), (&output, "out.snap")] {
        let path = dir.path().join(name);
        m.save(&path).unwrap();
        assert_eq!(&CalibrationModule::load(&path).unwrap(), m);
    }
    // a forecaster checkpoint is not a module snapshot
    let ckpt = dir.path().join("f.ckpt");
    f.save_checkpoint(&ckpt).unwrap();
    assert!(matches!(CalibrationModule::load(&ckpt), Err(Error::Checkpoint { .. })));
}

#[test]
fn malformed_csv_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("missing.csv", "date,a,b\n0,1,2\n1,,3\n", "missing value"),
        ("text.csv", "date,a,b\n0,1,2\n1,x,3\n", "non-numeric"),
        ("inf.csv", "date,a,b\n0,1,2\n1,inf,3\n", "non-finite"),
        ("short.csv", "date,a,b\n0,1,2\n", "rows"),
    ];
    for (name, body, needle) in cases {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        match load_csv(&path, 2) {
            Err(e @ Error::Data { .. }) => assert!(e.to_string().contains(needle), "{name}: {e}"),
            other => panic!("{name}: expected a data error, got {other:?}"),
        }
    }
}

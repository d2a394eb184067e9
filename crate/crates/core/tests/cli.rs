mod common;

use std::fs;

use bionic::cli::{load_config, load_model, predictions_csv, RunConfig};
use bionic::classify::predict_proba_dataset;
use bionic::inference::SupervisionRegime;
use bionic::synthetic::{generate_synthetic, inject_missingness, SyntheticSpec};
use common::{bionic, ok, quick_hyper, write_split_config};

fn split_dir() -> (tempfile::TempDir, std::path::PathBuf) {
    let mut spec = SyntheticSpec::new(70, vec![5, 4, 3], 2, 4);
    spec.entry_missing = vec![0.05, 0.0, 0.1];
    spec.view_missing = vec![0.0, 0.2, 0.1];
    let (d, _) = generate_synthetic(&spec).unwrap();
    let d = inject_missingness(&d, &spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let test: Vec<usize> = (0..d.n()).filter(|i| i % 5 == 0).collect();
    let cfg = write_split_config(dir.path(), &d, &test, quick_hyper(), SupervisionRegime::S);
    (dir, cfg)
}

#[test]
fn fit_predict_impute_explain_round_trip() {
    let (dir, cfg) = split_dir();
    let p = dir.path();
    let model = p.join("model.json");
    let out = ok(&["fit".as_ref(), "--config".as_ref(), cfg.as_os_str(), "--out".as_ref(), model.as_os_str()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("regime=S"));

    let pred = p.join("pred.csv");
    let out = ok(&["predict", "--model", model.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc="));
    let text = fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,prob_0,prob_1,pred"));
    assert_eq!(lines.count(), 14);

    // The file matches an in-process prediction from the reloaded model.
    let loaded = load_config(&cfg).unwrap();
    let m = load_model(&model).unwrap();
    assert_eq!(m.config_hash, loaded.hash);
    let test = loaded.config.test_data(&m.state.preprocess.raw_specs, 2, false).unwrap().unwrap();
    let proba = predict_proba_dataset(&m.state, &test).unwrap();
    assert_eq!(text, predictions_csv(test.ids(), &proba));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("pred.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"], loaded.hash.as_str());

    let imp = p.join("imputed");
    ok(&["impute", "--model", model.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", imp.to_str().unwrap()]);
    for v in ["view0", "view1", "view2"] {
        let values = fs::read_to_string(imp.join(format!("{v}.csv"))).unwrap();
        assert_eq!(values.lines().count(), 15);
        assert!(!values.lines().skip(1).any(|l| l.split(',').any(|c| c.is_empty())), "{v} still has gaps");
        assert!(imp.join(format!("{v}.var.csv")).exists());
    }

    let exp = p.join("explain");
    ok(&[
        "explain", "--model", model.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", exp.to_str().unwrap(),
        "--class", "1", "--plot-data",
    ]);
    let sens = fs::read_to_string(exp.join("sensitivity_view0.csv")).unwrap();
    assert_eq!(sens.lines().next(), Some("feature,class_0,class_1"));
    assert_eq!(sens.lines().count(), 6);
    let rel = fs::read_to_string(exp.join("relevance_class_1.csv")).unwrap();
    assert_eq!(rel.lines().next(), Some("id,view0,view1,view2"));
    assert!(exp.join("plot_view2.csv").exists());
}

#[test]
fn simulate_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&["simulate", "--out", out.to_str().unwrap(), "--n", "30", "--dims", "4,3", "--view-missing", "0.2", "--seed", "9"]);
    let loaded = load_config(&out.join("config.json")).unwrap();
    let d = loaded.config.training_data().unwrap();
    assert_eq!(d.n(), 30);
    assert_eq!(d.n_views(), 2);
    assert!(out.join("truth.json").exists());
    // Same seed, same files.
    let again = dir.path().join("sim2");
    ok(&["simulate", "--out", again.to_str().unwrap(), "--n", "30", "--dims", "4,3", "--view-missing", "0.2", "--seed", "9"]);
    assert_eq!(fs::read(out.join("view0.csv")).unwrap(), fs::read(again.join("view0.csv")).unwrap());
}

#[test]
fn cv_prints_a_regime_table() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--out", sim.to_str().unwrap(), "--n", "40", "--dims", "4,3", "--label-missing", "0.3", "--seed", "2"]);
    let cfg_path = sim.join("config.json");
    let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg.hyper = quick_hyper();
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let csv = dir.path().join("cv.csv");
    let out = ok(&["cv", "--config", cfg_path.to_str().unwrap(), "--folds", "3", "--compare-regimes", "--out", csv.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("TSS"));
    let table = fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().next(), Some("regime,auc,bacc"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn usage_and_input_errors_exit_with_one() {
    assert_eq!(bionic(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(bionic(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bionic(&["fit", "--config", "/nonexistent/c.json", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(bionic(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"views": [], "surprise": 1}"#).unwrap();
    let out = bionic(&["fit", "--config", cfg.to_str().unwrap(), "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));
}

#[test]
fn model_files_with_another_format_version_are_rejected() {
    let (dir, cfg) = split_dir();
    let model = dir.path().join("model.json");
    ok(&["fit", "--config", cfg.to_str().unwrap(), "--out", model.to_str().unwrap(), "--max-sweeps", "5"]);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    v["format_version"] = 99.into();
    fs::write(&model, v.to_string()).unwrap();
    assert!(load_model(&model).is_err());
    let out = bionic(&["predict", "--model", model.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", "/tmp/none.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

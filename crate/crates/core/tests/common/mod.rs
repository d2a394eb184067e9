#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bionic::cli::RunConfig;
use bionic::dataset::{save_dataset, subset, MultiViewDataset, ViewSource};
use bionic::inference::SupervisionRegime;
use bionic::model::Hyperparams;

pub fn bionic<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bionic")).args(args).output().expect("binary runs")
}

pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    let out = bionic(args);
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn relative(sources: &[ViewSource], base: &Path) -> Vec<Option<PathBuf>> {
    sources
        .iter()
        .map(|v| v.path.as_ref().map(|p| p.strip_prefix(base).unwrap().to_path_buf()))
        .collect()
}

/// Saves `train` and `test` rows under `dir` and writes `dir/config.json` pointing at them.
pub fn write_split_config(
    dir: &Path,
    d: &MultiViewDataset,
    test_rows: &[usize],
    hyper: Hyperparams,
    regime: SupervisionRegime,
) -> PathBuf {
    let train_rows: Vec<usize> = (0..d.n()).filter(|i| !test_rows.contains(i)).collect();
    let train = save_dataset(&subset(d, &train_rows).unwrap(), &dir.join("train")).unwrap();
    let test = save_dataset(&subset(d, test_rows).unwrap(), &dir.join("test")).unwrap();
    let views = train
        .views
        .iter()
        .zip(relative(&train.views, dir))
        .map(|(v, p)| ViewSource {
            path: p,
            ..v.clone()
        })
        .collect();
    let config = RunConfig {
        views,
        labels: Some(PathBuf::from("train/labels.csv")),
        n_classes: train.n_classes,
        hyper,
        regime: Some(regime),
        unlabeled_views: None,
        test_views: Some(relative(&test.views, dir)),
        test_labels: Some(PathBuf::from("test/labels.csv")),
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

pub fn quick_hyper() -> Hyperparams {
    Hyperparams {
        h_init: 8,
        max_sweeps: 80,
        conv_window: 20,
        prune_every: 20,
        ..Hyperparams::default()
    }
}

//! Command-line front end: experiment configs, model files and report writers.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{argmax_lower, predict_proba_dataset};
use crate::dataset::{load_dataset, save_dataset, write_view_csv, DatasetConfig, MultiViewDataset, ViewKind, ViewSource};
use crate::error::{BionicError, Result};
use crate::eval::{auc_from_proba, bacc, run_cv, run_regime_experiment, RegimeTable, DEFAULT_FOLDS};
use crate::impute::impute_dataset;
use crate::inference::{fit, SupervisionRegime};
use crate::interpret::{sensitivity_map, Relevance};
use crate::model::{Hyperparams, ModelState};
use crate::synthetic::{generate_synthetic, inject_missingness, SyntheticSpec};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One experiment: training views and labels, optional extra rows and a test set.
/// Relative paths resolve against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub views: Vec<ViewSource>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default)]
    pub regime: Option<SupervisionRegime>,
    /// Extra unlabeled rows, one file per view (null for a view they all lack).
    #[serde(default)]
    pub unlabeled_views: Option<Vec<Option<PathBuf>>>,
    /// Held-out rows scored by `predict`, `impute` and `explain`, and fed without
    /// labels to the TSS fit.
    #[serde(default)]
    pub test_views: Option<Vec<Option<PathBuf>>>,
    /// Only used to report test metrics; never read by a fit.
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

/// A config together with the SHA-256 of the bytes it was read from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| BionicError::io(path, e))?;
    let mut config: RunConfig = serde_json::from_slice(&bytes)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for v in &mut config.views {
        v.path = v.path.as_ref().map(|p| resolve(base, p));
    }
    config.labels = config.labels.as_ref().map(|p| resolve(base, p));
    config.test_labels = config.test_labels.as_ref().map(|p| resolve(base, p));
    for list in [&mut config.unlabeled_views, &mut config.test_views].into_iter().flatten() {
        if list.len() != config.views.len() {
            return Err(BionicError::validation(format!(
                "{} lists {} view files, expected {}",
                path.display(),
                list.len(),
                config.views.len()
            )));
        }
        for p in list.iter_mut() {
            *p = p.as_ref().map(|q| resolve(base, q));
        }
    }
    Ok(LoadedConfig {
        config,
        hash: sha256_hex(&bytes),
    })
}

impl RunConfig {
    pub fn training_data(&self) -> Result<MultiViewDataset> {
        load_dataset(&DatasetConfig {
            views: self.views.clone(),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        })
    }

    /// Loads a row set stored in the same view layout as the training views.
    fn aligned_data(
        &self,
        paths: &[Option<PathBuf>],
        labels: Option<PathBuf>,
        reference: &[crate::dataset::ViewSpec],
        n_classes: usize,
    ) -> Result<MultiViewDataset> {
        let views = self
            .views
            .iter()
            .zip(paths)
            .zip(reference)
            .map(|((v, p), spec)| ViewSource {
                name: v.name.clone(),
                path: p.clone(),
                kind: v.kind,
                dim: Some(spec.dim),
            })
            .collect();
        load_dataset(&DatasetConfig {
            views,
            labels,
            n_classes: Some(n_classes),
        })
    }

    pub fn unlabeled_data(&self, reference: &[crate::dataset::ViewSpec], n_classes: usize) -> Result<Option<MultiViewDataset>> {
        match &self.unlabeled_views {
            Some(paths) => Ok(Some(self.aligned_data(paths, None, reference, n_classes)?.without_labels())),
            None => Ok(None),
        }
    }

    /// Test inputs, with labels only when `with_labels` is set.
    pub fn test_data(
        &self,
        reference: &[crate::dataset::ViewSpec],
        n_classes: usize,
        with_labels: bool,
    ) -> Result<Option<MultiViewDataset>> {
        match &self.test_views {
            Some(paths) => {
                let labels = if with_labels { self.test_labels.clone() } else { None };
                Ok(Some(self.aligned_data(paths, labels, reference, n_classes)?))
            }
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub state: ModelState,
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    let text = serde_json::to_string_pretty(model)?;
    fs::write(path, text).map_err(|e| BionicError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| BionicError::io(path, e))?;
    let model: ModelFile = serde_json::from_slice(&bytes)?;
    if model.format_version != MODEL_FORMAT_VERSION {
        return Err(BionicError::validation(format!(
            "model file format {} is not supported (expected {MODEL_FORMAT_VERSION})",
            model.format_version
        )));
    }
    model.state.check_invariants()?;
    Ok(model)
}

/// Fits the model the config describes. TSS adds the test inputs, never their labels.
pub fn fit_from_config(cfg: &RunConfig, regime: SupervisionRegime, hyper: &Hyperparams) -> Result<ModelState> {
    let train = cfg.training_data()?;
    let c = train.n_classes();
    let mut extra = cfg.unlabeled_data(train.specs(), c)?;
    if regime == SupervisionRegime::TSS {
        match cfg.test_data(train.specs(), c, false)? {
            Some(test) => {
                extra = Some(match extra {
                    Some(u) => u.concat(&test)?,
                    None => test,
                })
            }
            None => eprintln!("warning: TSS without test_views; fitting like SS"),
        }
    }
    let extra = if regime == SupervisionRegime::S { None } else { extra };
    fit(&train, hyper, regime, extra.as_ref())
}

/// Predictions as CSV text: `id,prob_0..prob_{C−1},pred`.
pub fn predictions_csv(ids: &[String], proba: &DMatrix<f64>) -> String {
    let mut out = String::from("id");
    for c in 0..proba.ncols() {
        out.push_str(&format!(",prob_{c}"));
    }
    out.push_str(",pred\n");
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for c in 0..proba.ncols() {
            out.push_str(&format!(",{}", proba[(i, c)]));
        }
        out.push_str(&format!(",{}\n", argmax_lower(&proba.row(i).transpose())));
    }
    out
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_hash: &'a str,
    model_config_hash: Option<&'a str>,
    seed: u64,
}

fn write_provenance(path: &Path, p: &Provenance) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(p)?).map_err(|e| BionicError::io(path, e))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BionicError::io(dir, e))
}

#[derive(Parser, Debug)]
#[command(name = "bionic", version, about = "Bayesian multi-view latent model for incomplete multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write it to a model file.
    Fit(FitArgs),
    /// Class probabilities for the test rows (or the training rows without a test set).
    Predict(ModelArgs),
    /// Fill missing entries and write per-view values and variances.
    Impute(ModelArgs),
    /// Sensitivity vectors and per-sample relevance scores.
    Explain(ExplainArgs),
    /// Stratified cross-validation.
    Cv(CvArgs),
    /// Sample a synthetic dataset with a ready-to-use config.
    Simulate(SimulateArgs),
}

fn parse_regime(s: &str) -> std::result::Result<SupervisionRegime, String> {
    s.parse().map_err(|e: BionicError| e.to_string())
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_regime)]
    regime: Option<SupervisionRegime>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[command(flatten)]
    io: ModelArgs,
    /// Class whose logit is explained; defaults to the last class.
    #[arg(long)]
    class: Option<usize>,
    /// Also write per-sample, per-feature contribution tables for heatmaps.
    #[arg(long)]
    plot_data: bool,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_regime)]
    regime: Option<SupervisionRegime>,
    /// Run S, SS and TSS on shared folds.
    #[arg(long)]
    compare_regimes: bool,
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// Also write the summary table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 8, 6])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    h_true: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Noise precision of every view.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    entry_missing: f64,
    #[arg(long, default_value_t = 0.0)]
    view_missing: f64,
    #[arg(long, default_value_t = 0.0)]
    label_missing: f64,
    /// Store the last view as an embedding view.
    #[arg(long)]
    embedding_last: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn with_overrides(h: &Hyperparams, seed: Option<u64>, max_sweeps: Option<usize>) -> Hyperparams {
    let mut h = h.clone();
    if let Some(s) = seed {
        h.seed = s;
    }
    if let Some(m) = max_sweeps {
        h.max_sweeps = m;
    }
    h
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let loaded = load_config(&a.config)?;
    let cfg = &loaded.config;
    let regime = a.regime.or(cfg.regime).unwrap_or(SupervisionRegime::S);
    let mut hyper = with_overrides(&cfg.hyper, a.seed, a.max_sweeps);
    hyper.verbose = true;
    let mut state = fit_from_config(cfg, regime, &hyper)?;
    state.hyper.verbose = cfg.hyper.verbose;
    let model = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        config_hash: loaded.hash.clone(),
        seed: hyper.seed,
        state,
    };
    save_model(&a.out, &model)?;
    let trace = &model.state.elbo_trace;
    println!(
        "regime={} sweeps={} elbo={} active_h={} model={}",
        regime.as_str(),
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        model.state.active_h,
        a.out.display()
    );
    Ok(())
}

/// The rows a model command operates on: the test set when configured, else the
/// training rows. Labels are loaded only for reporting.
fn target_data(cfg: &RunConfig, state: &ModelState) -> Result<MultiViewDataset> {
    let reference = &state.preprocess.raw_specs;
    match cfg.test_data(reference, state.n_classes, true)? {
        Some(d) => Ok(d),
        None => {
            let d = cfg.training_data()?;
            if d.n_classes() != state.n_classes {
                return Err(BionicError::validation("config labels disagree with the model's class count"));
            }
            Ok(d)
        }
    }
}

fn report_metrics(d: &MultiViewDataset, proba: &DMatrix<f64>) {
    let labeled = d.labeled_indices();
    if labeled.is_empty() {
        return;
    }
    let truth: Vec<usize> = labeled.iter().map(|&i| d.labels().class_of(i).expect("labeled")).collect();
    let p = DMatrix::from_fn(labeled.len(), proba.ncols(), |r, c| proba[(labeled[r], c)]);
    let preds: Vec<usize> = (0..p.nrows()).map(|r| argmax_lower(&p.row(r).transpose())).collect();
    match auc_from_proba(&p, &truth) {
        Ok(a) => println!("auc={a:.4}"),
        Err(e) => eprintln!("warning: {e}"),
    }
    if let Ok(b) = bacc(&preds, &truth) {
        println!("bacc={b:.4}");
    }
}

fn cmd_predict(a: &ModelArgs) -> Result<()> {
    let loaded = load_config(&a.config)?;
    let model = load_model(&a.model)?;
    let d = target_data(&loaded.config, &model.state)?;
    let proba = predict_proba_dataset(&model.state, &d)?;
    fs::write(&a.out, predictions_csv(d.ids(), &proba)).map_err(|e| BionicError::io(&a.out, e))?;
    write_provenance(
        &sidecar(&a.out),
        &Provenance {
            command: "predict",
            config_hash: &loaded.hash,
            model_config_hash: Some(&model.config_hash),
            seed: model.seed,
        },
    )?;
    println!("wrote {} predictions to {}", d.n(), a.out.display());
    report_metrics(&d, &proba);
    Ok(())
}

fn cmd_impute(a: &ModelArgs) -> Result<()> {
    let loaded = load_config(&a.config)?;
    let model = load_model(&a.model)?;
    let d = target_data(&loaded.config, &model.state)?;
    let imputed = impute_dataset(&model.state, &d)?;
    create_dir(&a.out)?;
    for (m, spec) in d.specs().iter().enumerate() {
        let block = imputed.data.block(m);
        write_view_csv(&a.out.join(format!("{}.csv", spec.name)), d.ids(), &spec.feature_names, block.values(), block.mask())?;
        write_view_csv(
            &a.out.join(format!("{}.var.csv", spec.name)),
            d.ids(),
            &spec.feature_names,
            &imputed.variances[m],
            block.mask(),
        )?;
    }
    write_provenance(
        &a.out.join("meta.json"),
        &Provenance {
            command: "impute",
            config_hash: &loaded.hash,
            model_config_hash: Some(&model.config_hash),
            seed: model.seed,
        },
    )?;
    println!("wrote {} imputed views to {}", d.n_views(), a.out.display());
    Ok(())
}

fn write_csv(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| BionicError::io(path, e))
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let loaded = load_config(&a.io.config)?;
    let model = load_model(&a.io.model)?;
    let s = &model.state;
    let class = a.class.unwrap_or(s.n_classes - 1);
    let d = target_data(&loaded.config, s)?;
    let map = sensitivity_map(s, &d, class)?;
    let out = &a.io.out;
    create_dir(out)?;
    let raw = &s.preprocess.raw_specs;
    for (m, spec) in raw.iter().enumerate() {
        let sens = &map.per_view[m];
        let mut text = String::from("feature");
        for c in 0..s.n_classes {
            text.push_str(&format!(",class_{c}"));
        }
        text.push('\n');
        for (j, name) in spec.feature_names.iter().enumerate() {
            text.push_str(name);
            for c in 0..s.n_classes {
                text.push_str(&format!(",{}", sens[(j, c)]));
            }
            text.push('\n');
        }
        write_csv(&out.join(format!("sensitivity_{}.csv", spec.name)), &text)?;
    }

    let mut text = String::from("id");
    for spec in raw {
        text.push_str(&format!(",{}", spec.name));
    }
    text.push('\n');
    for (i, id) in d.ids().iter().enumerate() {
        text.push_str(id);
        for r in &map.per_sample[i] {
            match r {
                Relevance::Score(v) => text.push_str(&format!(",{v}")),
                Relevance::Unobserved => text.push(','),
            }
        }
        text.push('\n');
    }
    write_csv(&out.join(format!("relevance_class_{class}.csv")), &text)?;

    if a.plot_data {
        for (m, spec) in raw.iter().enumerate() {
            let vp = &s.preprocess.per_view[m];
            let sens = map.per_view[m].column(class);
            let block = d.block(m);
            let mut text = String::from("id,feature_index,feature,contribution\n");
            for (i, id) in d.ids().iter().enumerate() {
                if !block.row_observed(i) {
                    continue;
                }
                for (j, name) in spec.feature_names.iter().enumerate() {
                    // Unobserved entries sit at the training mean and contribute nothing.
                    let centered = if block.mask()[(i, j)] { block.values()[(i, j)] - vp.mean[j] } else { 0.0 };
                    text.push_str(&format!("{id},{j},{name},{}\n", centered * sens[j]));
                }
            }
            write_csv(&out.join(format!("plot_{}.csv", spec.name)), &text)?;
        }
    }
    write_provenance(
        &out.join("meta.json"),
        &Provenance {
            command: "explain",
            config_hash: &loaded.hash,
            model_config_hash: Some(&model.config_hash),
            seed: model.seed,
        },
    )?;
    println!("wrote sensitivity and relevance for class {class} to {}", out.display());
    Ok(())
}

fn cmd_cv(a: &CvArgs) -> Result<()> {
    let loaded = load_config(&a.config)?;
    let cfg = &loaded.config;
    let hyper = with_overrides(&cfg.hyper, None, a.max_sweeps);
    let train = cfg.training_data()?;
    let d = match cfg.unlabeled_data(train.specs(), train.n_classes())? {
        Some(u) => train.concat(&u)?,
        None => train,
    };
    let table = if a.compare_regimes {
        run_regime_experiment(&d, &hyper, a.folds, a.seed)?
    } else {
        let regime = a.regime.or(cfg.regime).unwrap_or(SupervisionRegime::S);
        let cv = run_cv(&d, &hyper, regime, a.folds, a.seed)?;
        for f in &cv.folds {
            let auc = f.auc.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"));
            println!("fold={} n_train={} n_test={} auc={auc} bacc={:.4}", f.fold, f.n_train, f.n_test, f.bacc);
        }
        RegimeTable { rows: vec![cv] }
    };
    print!("{table}");
    print!("{}", table.to_csv());
    if let Some(out) = &a.out {
        write_csv(out, &table.to_csv())?;
        write_provenance(
            &sidecar(out),
            &Provenance {
                command: "cv",
                config_hash: &loaded.hash,
                model_config_hash: None,
                seed: a.seed,
            },
        )?;
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.n, a.dims.clone(), a.h_true, a.seed);
    let m = a.dims.len();
    spec.n_classes = a.classes;
    spec.noise_precisions = vec![a.noise; m];
    spec.entry_missing = vec![a.entry_missing; m];
    spec.view_missing = vec![a.view_missing; m];
    spec.label_missing = a.label_missing;
    if a.embedding_last && m > 0 {
        spec.view_kinds[m - 1] = ViewKind::Embedding;
    }
    let (complete, truth) = generate_synthetic(&spec)?;
    let d = inject_missingness(&complete, &spec)?;
    create_dir(&a.out)?;
    let saved = save_dataset(&d, &a.out)?;
    let file_name = |p: &Option<PathBuf>| p.as_ref().and_then(|p| p.file_name()).map(PathBuf::from);
    let config = RunConfig {
        views: saved
            .views
            .iter()
            .map(|v| ViewSource {
                name: v.name.clone(),
                path: file_name(&v.path),
                kind: v.kind,
                dim: v.dim,
            })
            .collect(),
        labels: file_name(&saved.labels),
        n_classes: saved.n_classes,
        hyper: Hyperparams::default(),
        regime: Some(SupervisionRegime::S),
        unlabeled_views: None,
        test_views: None,
        test_labels: None,
    };
    write_csv(&a.out.join("config.json"), &serde_json::to_string_pretty(&config)?)?;
    write_csv(
        &a.out.join("truth.json"),
        &serde_json::to_string(&serde_json::json!({ "spec": spec, "truth": truth }))?,
    )?;
    println!("wrote {} samples over {m} views to {}", d.n(), a.out.display());
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the process exit
/// code: 0 on success, 1 for validation and usage errors, 2 for numerical failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

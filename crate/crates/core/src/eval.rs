//! Class-stratified cross-validation, AUC / balanced accuracy, and the
//! supervision-regime comparison.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{argmax_lower, predict_proba_dataset};
use crate::dataset::{subset, MultiViewDataset};
use crate::error::{BionicError, Result};
use crate::inference::{fit, SupervisionRegime};
use crate::model::Hyperparams;

pub const DEFAULT_FOLDS: usize = 10;

/// Environment variable capping the worker threads used for parallel folds.
pub const THREADS_ENV: &str = "BIONIC_THREADS";

/// Splits positions `0..labels.len()` into `k` folds, stratified by class.
///
/// Each class is shuffled and dealt round-robin; the dealing offset carries over
/// between classes so fold sizes also stay within one of each other.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if k < 2 {
        return Err(BionicError::validation("at least two folds are required"));
    }
    if k > n {
        return Err(BionicError::validation(format!("{k} folds requested for {n} labeled samples")));
    }
    let n_classes = labels.iter().max().map_or(0, |&c| c + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            eprintln!(
                "warning: class {c} has {} samples for {k} folds; some folds will lack it",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            folds[(offset + j) % k].push(i);
        }
        offset += labels.iter().filter(|&&l| l == c).count();
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Mann–Whitney AUC with ties counted as one half, via midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(BionicError::validation("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(BionicError::validation("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(BionicError::validation("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the midrank sum of the positives, kept integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            if labels[idx] {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn bacc(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(BionicError::validation("predictions and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(BionicError::validation("balanced accuracy of an empty set"));
    }
    let n_classes = labels.iter().max().map_or(0, |&c| c + 1);
    let mut hits = vec![0u64; n_classes];
    let mut totals = vec![0u64; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let recalls: Vec<f64> = (0..n_classes)
        .filter(|&c| totals[c] > 0)
        .map(|c| hits[c] as f64 / totals[c] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Binary AUC on the class-1 probability; macro one-vs-rest for more classes.
pub fn auc_from_proba(proba: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let c = proba.ncols();
    let column = |j: usize| -> Vec<f64> { proba.column(j).iter().cloned().collect() };
    if c == 2 {
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&column(1), &y);
    }
    let mut values = Vec::new();
    for j in 0..c {
        let y: Vec<bool> = labels.iter().map(|&l| l == j).collect();
        if y.iter().any(|&b| b) && y.iter().any(|&b| !b) {
            values.push(auc(&column(j), &y)?);
        }
    }
    if values.is_empty() {
        return Err(BionicError::validation("AUC needs both classes"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample (n − 1) standard deviation; `None` with fewer than two values.
    pub sd: Option<f64>,
}

impl MetricSummary {
    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(MetricSummary { mean, sd })
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sd {
            Some(sd) => write!(f, "{:.4} ± {:.4}", self.mean, sd),
            None => write!(f, "{:.4} ± nan", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Rows the preprocessing was fitted on.
    pub preprocess_rows: usize,
    /// `None` when the test fold holds a single class.
    pub auc: Option<f64>,
    pub bacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub regime: SupervisionRegime,
    pub folds: Vec<FoldMetrics>,
    pub auc: Option<MetricSummary>,
    pub bacc: Option<MetricSummary>,
}

/// Runs `f` on a pool capped by `BIONIC_THREADS` when set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| BionicError::validation(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
            if n == 0 {
                return Err(BionicError::validation(format!("{THREADS_ENV} must be positive")));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| BionicError::validation(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// Folds over the labeled rows of `d`, as dataset indices.
pub fn labeled_folds(d: &MultiViewDataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let labeled = d.labeled_indices();
    let labels: Vec<usize> = labeled
        .iter()
        .map(|&i| d.labels().class_of(i).expect("labeled"))
        .collect();
    let folds = stratified_folds(&labels, k, seed)?;
    Ok(folds
        .into_iter()
        .map(|f| f.into_iter().map(|p| labeled[p]).collect())
        .collect())
}

fn run_fold(
    d: &MultiViewDataset,
    h: &Hyperparams,
    regime: SupervisionRegime,
    fold: usize,
    test: &[usize],
) -> Result<FoldMetrics> {
    let in_test: Vec<bool> = {
        let mut v = vec![false; d.n()];
        test.iter().for_each(|&i| v[i] = true);
        v
    };
    let labeled_train: Vec<usize> = d.labeled_indices().into_iter().filter(|&i| !in_test[i]).collect();
    let test_set = subset(d, test)?;
    let state = match regime {
        SupervisionRegime::S => fit(&subset(d, &labeled_train)?, h, regime, None)?,
        SupervisionRegime::SS | SupervisionRegime::TSS => {
            let mut rows = labeled_train.clone();
            rows.extend(d.unlabeled_indices());
            rows.sort_unstable();
            let train = subset(d, &rows)?;
            let extra = (regime == SupervisionRegime::TSS).then(|| test_set.without_labels());
            fit(&train, h, regime, extra.as_ref())?
        }
    };
    let proba = predict_proba_dataset(&state, &test_set)?;
    let truth: Vec<usize> = (0..test_set.n())
        .map(|i| test_set.labels().class_of(i).expect("labeled test row"))
        .collect();
    let preds: Vec<usize> = (0..proba.nrows())
        .map(|i| argmax_lower(&proba.row(i).transpose()))
        .collect();
    let auc = match auc_from_proba(&proba, &truth) {
        Ok(v) => Some(v),
        Err(_) => {
            eprintln!("warning: fold {fold} test split holds a single class; AUC undefined and excluded");
            None
        }
    };
    Ok(FoldMetrics {
        fold,
        n_train: state.n_samples(),
        n_test: test.len(),
        preprocess_rows: state.preprocess.n_fit,
        auc,
        bacc: bacc(&preds, &truth)?,
    })
}

/// Cross-validation over precomputed folds of labeled dataset indices.
pub fn run_cv_with_folds(
    d: &MultiViewDataset,
    h: &Hyperparams,
    regime: SupervisionRegime,
    folds: &[Vec<usize>],
) -> Result<CvResult> {
    let results: Vec<FoldMetrics> = with_thread_cap(|| {
        folds
            .par_iter()
            .enumerate()
            .map(|(f, test)| run_fold(d, h, regime, f, test))
            .collect::<Result<Vec<_>>>()
    })??;
    let aucs: Vec<f64> = results.iter().filter_map(|r| r.auc).collect();
    let baccs: Vec<f64> = results.iter().map(|r| r.bacc).collect();
    Ok(CvResult {
        regime,
        auc: MetricSummary::from_values(&aucs),
        bacc: MetricSummary::from_values(&baccs),
        folds: results,
    })
}

pub fn run_cv(d: &MultiViewDataset, h: &Hyperparams, regime: SupervisionRegime, k: usize, seed: u64) -> Result<CvResult> {
    let folds = labeled_folds(d, k, seed)?;
    run_cv_with_folds(d, h, regime, &folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeTable {
    pub rows: Vec<CvResult>,
}

impl RegimeTable {
    pub fn to_csv(&self) -> String {
        let cell = |m: &Option<MetricSummary>| m.map_or_else(|| "nan ± nan".to_string(), |v| v.to_string());
        let mut out = String::from("regime,auc,bacc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.regime.as_str(), cell(&r.auc), cell(&r.bacc)));
        }
        out
    }
}

impl fmt::Display for RegimeTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |m: &Option<MetricSummary>| m.map_or_else(|| "nan ± nan".to_string(), |v| v.to_string());
        writeln!(f, "{:<8}{:<22}{:<22}", "regime", "AUC", "BACC")?;
        for r in &self.rows {
            writeln!(f, "{:<8}{:<22}{:<22}", r.regime.as_str(), cell(&r.auc), cell(&r.bacc))?;
        }
        Ok(())
    }
}

/// Cross-validates S, SS and TSS on the same folds.
pub fn run_regime_experiment(d: &MultiViewDataset, h: &Hyperparams, k: usize, seed: u64) -> Result<RegimeTable> {
    let folds = labeled_folds(d, k, seed)?;
    let rows = SupervisionRegime::ALL
        .iter()
        .map(|&r| run_cv_with_folds(d, h, r, &folds))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegimeTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3], &[false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn bacc_examples() {
        assert_eq!(bacc(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(bacc(&[0, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(bacc(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert!(bacc(&[], &[]).is_err());
    }

    #[test]
    fn balanced_folds() {
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let folds = stratified_folds(&labels, 5, 3).unwrap();
        for f in &folds {
            assert_eq!(f.len(), 2);
            assert_eq!(f.iter().filter(|&&i| labels[i] == 0).count(), 1);
        }
        assert!(stratified_folds(&labels, 1, 0).is_err());
        assert!(stratified_folds(&labels, 11, 0).is_err());
    }

    #[test]
    fn summary_uses_sample_sd() {
        let s = MetricSummary::from_values(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.sd, Some(1.0));
        assert_eq!(s.to_string(), "2.0000 ± 1.0000");
    }
}

//! Predictive class probabilities from both latent pathways.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::{MultiViewDataset, Sample};
use crate::error::Result;
use crate::impute::{embed_sample, SampleEmbedding};
use crate::linalg::{sigmoid, trace_of_product};
use crate::model::ModelState;

/// Gaussian over the C output logits of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPrediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// Logit mean E[U]E[z] + E[V_T]E[g] and variance from every posterior covariance
/// involved plus the output noise.
pub fn logits_from_embedding(s: &ModelState, e: &SampleEmbedding) -> LogitPrediction {
    let mu_u = &s.qu.mean;
    let mu_t = &s.qvt.mean;
    let cov_u = &s.qu.covs[0];
    let cov_t = &s.qvt.covs[0];
    let cov_z = DMatrix::from_diagonal(&e.z_var);
    let mean = mu_u * &e.z_mean + mu_t * &e.g_mean;

    let shared = (cov_u * &e.z_mean).dot(&e.z_mean)
        + trace_of_product(cov_u, &cov_z)
        + (cov_t * &e.g_mean).dot(&e.g_mean)
        + trace_of_product(cov_t, &e.g_cov)
        + 1.0 / s.psi_t.mean();
    let var = DVector::from_fn(s.n_classes, |c, _| {
        let u = mu_u.row(c).transpose();
        let v = mu_t.row(c).transpose();
        let from_z: f64 = u.iter().zip(e.z_var.iter()).map(|(a, w)| a * a * w).sum();
        from_z + (&e.g_cov * &v).dot(&v) + shared
    });
    LogitPrediction { mean, var }
}

pub fn predict_logits(s: &ModelState, sample: &Sample) -> Result<LogitPrediction> {
    let e = embed_sample(s, sample)?;
    Ok(logits_from_embedding(s, &e))
}

/// σ(κ(v)·μ) with κ(v) = (1 + πv/8)^(−1/2).
pub fn moderated_probability(mu: f64, var: f64) -> f64 {
    let kappa = (1.0 + PI * var / 8.0).powf(-0.5);
    sigmoid(kappa * mu)
}

pub fn proba_from_logits(l: &LogitPrediction) -> DVector<f64> {
    let mut p = DVector::from_fn(l.mean.len(), |c, _| moderated_probability(l.mean[c], l.var[c]));
    if p.len() == 2 {
        let total = p.sum();
        p /= total;
    }
    p
}

pub fn predict_proba(s: &ModelState, sample: &Sample) -> Result<DVector<f64>> {
    Ok(proba_from_logits(&predict_logits(s, sample)?))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax_lower(p: &DVector<f64>) -> usize {
    let mut best = 0;
    for c in 1..p.len() {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

/// Class probabilities for every sample, N × C.
pub fn predict_proba_dataset(s: &ModelState, d: &MultiViewDataset) -> Result<DMatrix<f64>> {
    let rows: Vec<DVector<f64>> = (0..d.n())
        .into_par_iter()
        .map(|i| predict_proba(s, &d.sample(i)))
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(d.n(), s.n_classes);
    for (i, r) in rows.iter().enumerate() {
        out.set_row(i, &r.transpose());
    }
    Ok(out)
}

pub fn predict_labels(s: &ModelState, d: &MultiViewDataset) -> Result<Vec<usize>> {
    let p = predict_proba_dataset(s, d)?;
    Ok((0..p.nrows()).map(|i| argmax_lower(&p.row(i).transpose())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moderation_examples() {
        assert_eq!(moderated_probability(0.0, 7.0), 0.5);
        assert!((moderated_probability(10.0, 0.0) - sigmoid(10.0)).abs() < 1e-15);
        assert!((moderated_probability(10.0, 0.0) - 0.9999546).abs() < 1e-7);
        let mut prev = moderated_probability(1.3, 0.0);
        for v in [0.1, 1.0, 5.0, 50.0, 500.0] {
            let p = moderated_probability(1.3, v);
            assert!(p < prev && p > 0.5);
            prev = p;
        }
    }

    #[test]
    fn binary_outputs_sum_to_one() {
        let l = LogitPrediction {
            mean: DVector::from_vec(vec![0.7, -2.0]),
            var: DVector::from_vec(vec![0.3, 1.5]),
        };
        let p = proba_from_logits(&l);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(argmax_lower(&DVector::from_vec(vec![0.9, 0.1])), 0);
        assert_eq!(argmax_lower(&DVector::from_vec(vec![0.5, 0.5])), 0);
        assert_eq!(argmax_lower(&DVector::from_vec(vec![0.2, 0.4, 0.4])), 1);
    }
}

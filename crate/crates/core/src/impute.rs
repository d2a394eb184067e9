//! Gaussian reconstruction of missing entries and views from the generative latent.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{MultiViewDataset, Sample, ViewBlock};
use crate::error::{BionicError, Result};
use crate::inference::row_second_moment;
use crate::linalg::spd_inverse;
use crate::model::ModelState;

/// Posterior over both latents of one sample given only its observed views.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEmbedding {
    pub g_mean: DVector<f64>,
    pub g_cov: DMatrix<f64>,
    pub z_mean: DVector<f64>,
    /// Diagonal of the z covariance (the columns of W are independent under q).
    pub z_var: DVector<f64>,
    /// Zero-filled preprocessed inputs per view.
    pub inputs: Vec<DVector<f64>>,
    pub observed: Vec<bool>,
}

/// Preprocesses a raw sample: zero-filled values, per-feature mask, per-view flag.
pub fn preprocess_sample(s: &ModelState, sample: &Sample) -> Result<(Vec<DVector<f64>>, Vec<Vec<bool>>)> {
    if sample.values.len() != s.n_views() || sample.masks.len() != s.n_views() {
        return Err(BionicError::validation(format!(
            "sample has {} views, model has {}",
            sample.values.len(),
            s.n_views()
        )));
    }
    let mut xs = Vec::with_capacity(s.n_views());
    let mut masks = Vec::with_capacity(s.n_views());
    for (m, vp) in s.preprocess.per_view.iter().enumerate() {
        let (x, mask) = vp.transform_row(&sample.values[m], &sample.masks[m])?;
        xs.push(DVector::from_fn(x.len(), |j, _| if mask[j] { x[j] } else { 0.0 }));
        masks.push(mask);
    }
    Ok((xs, masks))
}

/// One conjugate update of q(g) from the observed views plus the implied q(z),
/// holding every loading posterior fixed.
pub fn embed_sample(s: &ModelState, sample: &Sample) -> Result<SampleEmbedding> {
    let (inputs, masks) = preprocess_sample(s, sample)?;
    let observed: Vec<bool> = masks.iter().map(|m| m.iter().any(|&b| b)).collect();
    if !observed.iter().any(|&b| b) {
        return Err(BionicError::validation("sample has no observed view"));
    }
    let h = s.active_h;
    let mut prec = DMatrix::identity(h, h);
    let mut rhs = DVector::zeros(h);
    for m in 0..s.n_views() {
        if !observed[m] {
            continue;
        }
        let psi = s.noise[m].mean();
        let rows: Vec<usize> = (0..masks[m].len()).filter(|&j| masks[m][j]).collect();
        prec += row_second_moment(&s.qv[m], &rows) * psi;
        rhs += s.qv[m].mean.tr_mul(&inputs[m]) * psi;
    }
    let g_cov = spd_inverse(&prec)?.inverse;
    let g_mean = &g_cov * rhs;

    let tau_inv = 1.0 / s.tau.mean();
    let mut z_mean = DVector::zeros(s.k);
    let mut z_var = DVector::from_element(s.k, tau_inv);
    for (m, x) in inputs.iter().enumerate() {
        if !observed[m] {
            continue;
        }
        z_mean += s.qw[m].mean.tr_mul(x);
        for k in 0..s.k {
            z_var[k] += s.qw[m].quad_form(k, x);
        }
    }
    Ok(SampleEmbedding {
        g_mean,
        g_cov,
        z_mean,
        z_var,
        inputs,
        observed,
    })
}

/// Reconstruction of one view, in preprocessed and raw coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub raw_mean: DVector<f64>,
    pub raw_var: DVector<f64>,
}

/// Reconstructs view `view` from a latent posterior N(g_mean, g_cov).
///
/// Per preprocessed coordinate d the variance is
/// `μ_dᵀΣ_gμ_d + tr(Σ_d(μ_gμ_gᵀ + Σ_g)) + 1/E[ψ]`; raw variances propagate the full
/// covariance through the inverse preprocessing map.
pub fn reconstruct_from_latent(
    s: &ModelState,
    view: usize,
    g_mean: &DVector<f64>,
    g_cov: &DMatrix<f64>,
) -> Result<Reconstruction> {
    if view >= s.n_views() {
        return Err(BionicError::validation(format!("view index {view} out of range")));
    }
    let q = &s.qv[view];
    let mean = &q.mean * g_mean;
    let g_second = g_mean * g_mean.transpose() + g_cov;
    let noise = 1.0 / s.noise[view].mean();
    let cov_terms: Vec<f64> = q.covs.iter().map(|c| c.component_mul(&g_second).sum()).collect();
    let own = DVector::from_fn(q.rows(), |d, _| cov_terms[q.cov_index[d]] + noise);
    let shared = &q.mean * g_cov;
    let var = DVector::from_fn(q.rows(), |d, _| shared.row(d).dot(&q.mean.row(d)) + own[d]);

    let vp = &s.preprocess.per_view[view];
    let raw_mean = vp.invert(&mean)?;
    let a = vp.inverse_linear();
    let b = &a * &q.mean;
    let bs = &b * g_cov;
    let raw_var = DVector::from_fn(a.nrows(), |i, _| {
        let latent = bs.row(i).dot(&b.row(i));
        let local: f64 = (0..a.ncols()).map(|d| a[(i, d)] * a[(i, d)] * own[d]).sum();
        latent + local
    });
    Ok(Reconstruction {
        mean,
        var,
        raw_mean,
        raw_var,
    })
}

/// Reconstruction for a sample of the fitted cohort, using its fitted q(g).
pub fn reconstruct_view(s: &ModelState, sample: usize, view: usize) -> Result<Reconstruction> {
    if sample >= s.n_samples() {
        return Err(BionicError::validation(format!("sample index {sample} out of range")));
    }
    let g_mean = s.qg.mean.row(sample).transpose();
    reconstruct_from_latent(s, view, &g_mean, s.qg.cov(sample))
}

/// Completed dataset plus raw-coordinate predictive variances for every entry.
#[derive(Debug, Clone)]
pub struct Imputed {
    pub data: MultiViewDataset,
    pub variances: Vec<DMatrix<f64>>,
}

/// Fills every unobserved raw entry with its posterior reconstruction mean.
///
/// Each sample's q(g) comes from its own observed views. Observed entries are copied
/// verbatim; the output masks are all true.
pub fn impute_dataset(s: &ModelState, d: &MultiViewDataset) -> Result<Imputed> {
    let raw = &s.preprocess.raw_specs;
    if d.n_views() != raw.len() || d.specs().iter().zip(raw).any(|(a, b)| a.dim != b.dim || a.name != b.name) {
        return Err(BionicError::validation("dataset views do not match the fitted model"));
    }
    let n = d.n();
    let mut values: Vec<DMatrix<f64>> = d.blocks().iter().map(|b| b.values().clone()).collect();
    let mut variances: Vec<DMatrix<f64>> = d.specs().iter().map(|sp| DMatrix::zeros(n, sp.dim)).collect();
    for i in 0..n {
        let sample = d.sample(i);
        let emb = embed_sample(s, &sample)?;
        for m in 0..d.n_views() {
            let rec = reconstruct_from_latent(s, m, &emb.g_mean, &emb.g_cov)?;
            let mask = d.block(m).mask();
            for j in 0..rec.raw_mean.len() {
                if !mask[(i, j)] {
                    values[m][(i, j)] = rec.raw_mean[j];
                }
                variances[m][(i, j)] = rec.raw_var[j];
            }
        }
    }
    let blocks = values
        .into_iter()
        .map(ViewBlock::from_values)
        .collect::<Result<Vec<_>>>()?;
    let data = MultiViewDataset::new(d.specs().to_vec(), blocks, d.labels().clone(), d.ids().to_vec())?;
    Ok(Imputed { data, variances })
}

/// Root-mean-square error over the entries where `select` is true.
pub fn masked_rmse(truth: &DMatrix<f64>, estimate: &DMatrix<f64>, select: &DMatrix<bool>) -> Option<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((t, e), &sel) in truth.iter().zip(estimate.iter()).zip(select.iter()) {
        if sel {
            acc += (t - e).powi(2);
            count += 1;
        }
    }
    (count > 0).then(|| (acc / count as f64).sqrt())
}

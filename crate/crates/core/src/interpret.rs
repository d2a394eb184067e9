//! Raw-coordinate sensitivity of the discriminative logit and per-sample relevance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiViewDataset, Sample};
use crate::error::{BionicError, Result};
use crate::impute::preprocess_sample;
use crate::model::ModelState;

/// Relevance of one view for one sample. A view the sample lacks has no score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Relevance {
    Score(f64),
    Unobserved,
}

impl Relevance {
    pub fn score(&self) -> Option<f64> {
        match self {
            Relevance::Score(v) => Some(*v),
            Relevance::Unobserved => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    /// Per view, D_raw × C.
    pub per_view: Vec<DMatrix<f64>>,
    /// Class the per-sample scores refer to.
    pub class: usize,
    /// N × M relevance scores for `class`.
    pub per_sample: Vec<Vec<Relevance>>,
}

fn check_indices(s: &ModelState, view: usize, class: usize) -> Result<()> {
    if view >= s.n_views() {
        return Err(BionicError::validation(format!("view index {view} out of range")));
    }
    if class >= s.n_classes {
        return Err(BionicError::validation(format!("class index {class} out of range")));
    }
    Ok(())
}

/// Gradient of the expected class logit with respect to the raw inputs of one view
/// through the discriminative pathway: `rotation · diag(scale)⁻¹ · E[W] · E[U]_{class}ᵀ`.
///
/// Raw directions dropped by rotation truncation get exactly zero.
pub fn global_sensitivity(s: &ModelState, view: usize, class: usize) -> Result<DVector<f64>> {
    check_indices(s, view, class)?;
    let vp = &s.preprocess.per_view[view];
    let mut w = &s.qw[view].mean * s.qu.mean.row(class).transpose();
    w.component_div_assign(&vp.scale);
    Ok(&vp.rotation * w)
}

/// D_raw × C sensitivity matrix of one view.
pub fn view_sensitivity(s: &ModelState, view: usize) -> Result<DMatrix<f64>> {
    let cols = (0..s.n_classes)
        .map(|c| global_sensitivity(s, view, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Raw row with unobserved entries replaced by the training mean, if any entry is observed.
fn centered_raw(s: &ModelState, sample: &Sample, view: usize) -> Option<DVector<f64>> {
    let vp = &s.preprocess.per_view[view];
    let mask = &sample.masks[view];
    if !mask.iter().any(|&b| b) {
        return None;
    }
    Some(DVector::from_fn(vp.raw_dim(), |j, _| {
        if mask[j] {
            sample.values[view][j] - vp.mean[j]
        } else {
            0.0
        }
    }))
}

/// ⟨x_raw − mean, S⟩ for one view and class.
pub fn sample_relevance(s: &ModelState, sample: &Sample, view: usize, class: usize) -> Result<Relevance> {
    check_indices(s, view, class)?;
    if sample.values.len() != s.n_views() {
        return Err(BionicError::validation("sample does not match the model's views"));
    }
    if sample.values[view].len() != s.preprocess.per_view[view].raw_dim() {
        return Err(BionicError::validation("sample view has the wrong dimension"));
    }
    match centered_raw(s, sample, view) {
        None => Ok(Relevance::Unobserved),
        Some(x) => Ok(Relevance::Score(x.dot(&global_sensitivity(s, view, class)?))),
    }
}

/// Discriminative part of the expected class logit, E[U]_{class} · Σ_m E[W_m]ᵀ x̃_m.
pub fn discriminative_logit(s: &ModelState, sample: &Sample, class: usize) -> Result<f64> {
    check_indices(s, 0, class)?;
    let (xs, _) = preprocess_sample(s, sample)?;
    let mut z = DVector::zeros(s.k);
    for (m, x) in xs.iter().enumerate() {
        z += s.qw[m].mean.tr_mul(x);
    }
    Ok(s.qu.mean.row(class).transpose().dot(&z))
}

/// Derivative of σ at a predicted probability, for rescaling logit sensitivities.
pub fn probability_factor(p: f64) -> f64 {
    p * (1.0 - p)
}

pub fn sensitivity_map(s: &ModelState, d: &MultiViewDataset, class: usize) -> Result<SensitivityMap> {
    let per_view = (0..s.n_views())
        .map(|m| view_sensitivity(s, m))
        .collect::<Result<Vec<_>>>()?;
    let mut per_sample = Vec::with_capacity(d.n());
    for i in 0..d.n() {
        let sample = d.sample(i);
        per_sample.push(
            (0..s.n_views())
                .map(|m| sample_relevance(s, &sample, m, class))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(SensitivityMap {
        per_view,
        class,
        per_sample,
    })
}

//! Per-view centering, variance-ordered orthogonal rotation with truncation, and
//! per-component scaling.
//!
//! The forward map is `x̃ = diag(scale)⁻¹ · rotationᵀ · (x − mean)`. Structured views
//! use the identity rotation and keep every feature.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiViewDataset, ViewBlock, ViewKind, ViewSpec};
use crate::error::{BionicError, Result};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.999;
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPreprocess {
    pub mean: DVector<f64>,
    /// D_raw × D_kept, orthonormal columns.
    pub rotation: DMatrix<f64>,
    pub scale: DVector<f64>,
    pub kept: usize,
    pub applies_rotation: bool,
    /// Covariance eigenvalues in decreasing order (embedding views only).
    pub eigenvalues: Vec<f64>,
}

impl ViewPreprocess {
    pub fn raw_dim(&self) -> usize {
        self.mean.len()
    }

    /// Maps one raw row. Returns the transformed row (NaN where unobserved) and its mask.
    ///
    /// Partially observed embedding rows are mean-filled before rotation and the whole
    /// rotated row counts as observed.
    pub fn transform_row(&self, values: &DVector<f64>, mask: &[bool]) -> Result<(DVector<f64>, Vec<bool>)> {
        if values.len() != self.raw_dim() || mask.len() != self.raw_dim() {
            return Err(BionicError::validation(format!(
                "row has {} features, preprocessing was fitted on {}",
                values.len(),
                self.raw_dim()
            )));
        }
        if !self.applies_rotation {
            let x = DVector::from_fn(self.kept, |j, _| {
                if mask[j] {
                    (values[j] - self.mean[j]) / self.scale[j]
                } else {
                    f64::NAN
                }
            });
            return Ok((x, mask.to_vec()));
        }
        if !mask.iter().any(|&m| m) {
            return Ok((DVector::from_element(self.kept, f64::NAN), vec![false; self.kept]));
        }
        let centered = DVector::from_fn(self.raw_dim(), |j, _| if mask[j] { values[j] - self.mean[j] } else { 0.0 });
        let mut x = self.rotation.tr_mul(&centered);
        x.component_div_assign(&self.scale);
        Ok((x, vec![true; self.kept]))
    }

    /// `mean + rotation · (scale ⊙ x̃)`.
    pub fn invert(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.kept {
            return Err(BionicError::validation(format!(
                "vector has {} components, view keeps {}",
                x.len(),
                self.kept
            )));
        }
        Ok(&self.mean + &self.rotation * x.component_mul(&self.scale))
    }

    /// Linear part of the inverse map, `rotation · diag(scale)` (D_raw × D_kept).
    pub fn inverse_linear(&self) -> DMatrix<f64> {
        let mut a = self.rotation.clone();
        for (j, mut col) in a.column_iter_mut().enumerate() {
            col *= self.scale[j];
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub per_view: Vec<ViewPreprocess>,
    /// Raw view specs the state was fitted on.
    pub raw_specs: Vec<ViewSpec>,
    /// Number of rows the state was fitted on.
    pub n_fit: usize,
}

fn observed_mean(block: &ViewBlock, j: usize) -> Option<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..block.nrows() {
        if block.mask()[(i, j)] {
            sum += block.values()[(i, j)];
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64, count))
}

fn fit_structured(spec: &ViewSpec, block: &ViewBlock) -> Result<ViewPreprocess> {
    let d = spec.dim;
    let mut mean = DVector::zeros(d);
    let mut scale = DVector::zeros(d);
    for j in 0..d {
        let (mu, count) = observed_mean(block, j).ok_or_else(|| {
            BionicError::validation(format!(
                "feature '{}' of view '{}' is never observed in training data",
                spec.feature_names[j], spec.name
            ))
        })?;
        let ss: f64 = (0..block.nrows())
            .filter(|&i| block.mask()[(i, j)])
            .map(|i| (block.values()[(i, j)] - mu).powi(2))
            .sum();
        let sd = if count > 1 { (ss / (count - 1) as f64).sqrt() } else { 0.0 };
        mean[j] = mu;
        scale[j] = sd.max(SCALE_FLOOR);
    }
    Ok(ViewPreprocess {
        mean,
        rotation: DMatrix::identity(d, d),
        scale,
        kept: d,
        applies_rotation: false,
        eigenvalues: Vec::new(),
    })
}

/// Smallest count whose cumulative share of the (non-negative) eigenvalue mass reaches `threshold`.
pub fn components_for_threshold(eigenvalues: &[f64], threshold: f64) -> usize {
    let total: f64 = eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    if total <= 0.0 {
        return 1;
    }
    let mut cum = 0.0;
    for (k, &v) in eigenvalues.iter().enumerate() {
        cum += v.max(0.0);
        if cum / total >= threshold {
            return k + 1;
        }
    }
    eigenvalues.len()
}

fn fit_embedding(spec: &ViewSpec, block: &ViewBlock, threshold: f64) -> Result<ViewPreprocess> {
    let d = spec.dim;
    let mut mean = DVector::zeros(d);
    for j in 0..d {
        mean[j] = observed_mean(block, j)
            .ok_or_else(|| {
                BionicError::validation(format!(
                    "feature '{}' of view '{}' is never observed in training data",
                    spec.feature_names[j], spec.name
                ))
            })?
            .0;
    }
    let rows: Vec<usize> = (0..block.nrows()).filter(|&i| block.row_observed(i)).collect();
    if rows.len() < 2 {
        return Err(BionicError::validation(format!(
            "view '{}' needs at least two observed training rows",
            spec.name
        )));
    }
    let centered = DMatrix::from_fn(rows.len(), d, |r, j| {
        let i = rows[r];
        if block.mask()[(i, j)] {
            block.values()[(i, j)] - mean[j]
        } else {
            0.0
        }
    });
    let cov = centered.tr_mul(&centered) / (rows.len() - 1) as f64;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(BionicError::numerical(format!("non-finite covariance in view '{}'", spec.name)));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let kept = components_for_threshold(&eigenvalues, threshold);

    let mut rotation = DMatrix::zeros(d, kept);
    for (k, &src) in order.iter().take(kept).enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let mut best = 0;
        for i in 1..d {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
        rotation.set_column(k, &col);
    }
    let projected = &centered * &rotation;
    let denom = (rows.len() - 1) as f64;
    let scale = DVector::from_fn(kept, |k, _| {
        let col = projected.column(k);
        let mu = col.mean();
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / denom;
        var.sqrt().max(SCALE_FLOOR)
    });
    Ok(ViewPreprocess {
        mean,
        rotation,
        scale,
        kept,
        applies_rotation: true,
        eigenvalues,
    })
}

/// Fits the per-view pipeline on training rows.
pub fn fit_preprocess(d: &MultiViewDataset, variance_threshold: f64) -> Result<PreprocessState> {
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(BionicError::validation(format!(
            "variance threshold {variance_threshold} outside (0, 1]"
        )));
    }
    let per_view = d
        .specs()
        .iter()
        .zip(d.blocks())
        .map(|(spec, block)| match spec.kind {
            ViewKind::Structured => fit_structured(spec, block),
            ViewKind::Embedding => fit_embedding(spec, block, variance_threshold),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreprocessState {
        per_view,
        raw_specs: d.specs().to_vec(),
        n_fit: d.n(),
    })
}

impl PreprocessState {
    fn check_specs(&self, d: &MultiViewDataset) -> Result<()> {
        if d.n_views() != self.per_view.len() {
            return Err(BionicError::validation(format!(
                "dataset has {} views, preprocessing has {}",
                d.n_views(),
                self.per_view.len()
            )));
        }
        for (spec, vp) in d.specs().iter().zip(&self.per_view) {
            if spec.dim != vp.raw_dim() || self.raw_specs.iter().all(|s| s.name != spec.name) {
                return Err(BionicError::validation(format!(
                    "view '{}' has {} features, preprocessing expects {}",
                    spec.name,
                    spec.dim,
                    vp.raw_dim()
                )));
            }
        }
        Ok(())
    }

    /// View specs of the transformed space.
    pub fn transformed_specs(&self) -> Vec<ViewSpec> {
        self.raw_specs
            .iter()
            .zip(&self.per_view)
            .map(|(spec, vp)| {
                if vp.applies_rotation {
                    ViewSpec {
                        name: spec.name.clone(),
                        kind: spec.kind,
                        dim: vp.kept,
                        feature_names: (0..vp.kept).map(|k| format!("pc{k}")).collect(),
                    }
                } else {
                    spec.clone()
                }
            })
            .collect()
    }
}

/// Transforms every view of `d` into preprocessed coordinates.
pub fn apply_preprocess(p: &PreprocessState, d: &MultiViewDataset) -> Result<MultiViewDataset> {
    p.check_specs(d)?;
    let n = d.n();
    let mut blocks = Vec::with_capacity(d.n_views());
    for (m, vp) in p.per_view.iter().enumerate() {
        let block = d.block(m);
        let mut values = DMatrix::zeros(n, vp.kept);
        let mut mask = DMatrix::from_element(n, vp.kept, false);
        for i in 0..n {
            let raw = block.values().row(i).transpose();
            let raw_mask: Vec<bool> = (0..block.ncols()).map(|j| block.mask()[(i, j)]).collect();
            let (x, obs) = vp.transform_row(&raw, &raw_mask)?;
            values.set_row(i, &x.transpose());
            for (j, o) in obs.into_iter().enumerate() {
                mask[(i, j)] = o;
            }
        }
        blocks.push(ViewBlock::new(values, mask)?);
    }
    MultiViewDataset::new(
        p.transformed_specs(),
        blocks,
        d.labels().clone(),
        d.ids().to_vec(),
    )
}

pub fn invert_preprocess(p: &PreprocessState, view: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
    let vp = p
        .per_view
        .get(view)
        .ok_or_else(|| BionicError::validation(format!("view index {view} out of range")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BionicError::validation("non-finite value passed to invert_preprocess"));
    }
    vp.invert(x)
}

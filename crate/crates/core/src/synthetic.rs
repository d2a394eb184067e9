//! Forward sampler of the generative model and small exact oracles for testing.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::{LabelBlock, MultiViewDataset, ViewBlock, ViewKind, ViewSpec};
use crate::error::{BionicError, Result};

/// Seed offset so missingness draws never share a stream with the sampler.
const MISSINGNESS_STREAM: u64 = 0x6d69_7373;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub view_dims: Vec<usize>,
    pub view_kinds: Vec<ViewKind>,
    pub h_true: usize,
    pub k_true: usize,
    /// Per-view noise precision; `f64::INFINITY` gives noiseless views.
    pub noise_precisions: Vec<f64>,
    /// Precision of z around Σ_m W_mᵀ x.
    pub tau: f64,
    /// Precision of the output-view noise.
    pub psi_t: f64,
    /// Multiplier on t before it is turned into class probabilities.
    pub label_scale: f64,
    pub n_classes: usize,
    pub entry_missing: Vec<f64>,
    pub view_missing: Vec<f64>,
    pub label_missing: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Binary problem over structured views with unit noise and no missingness.
    pub fn new(n: usize, view_dims: Vec<usize>, h_true: usize, seed: u64) -> Self {
        let m = view_dims.len();
        SyntheticSpec {
            n,
            view_kinds: vec![ViewKind::Structured; m],
            view_dims,
            h_true,
            k_true: 1,
            noise_precisions: vec![1.0; m],
            tau: 100.0,
            psi_t: 100.0,
            label_scale: 1.0,
            n_classes: 2,
            entry_missing: vec![0.0; m],
            view_missing: vec![0.0; m],
            label_missing: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.view_dims.len();
        if m == 0 {
            return Err(BionicError::validation("at least one view is required"));
        }
        let lens = [
            self.view_kinds.len(),
            self.noise_precisions.len(),
            self.entry_missing.len(),
            self.view_missing.len(),
        ];
        if lens.iter().any(|&l| l != m) {
            return Err(BionicError::validation("per-view settings must match the number of views"));
        }
        if self.view_dims.contains(&0) || self.h_true == 0 || self.k_true == 0 {
            return Err(BionicError::validation("dimensions must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(BionicError::validation("at least two classes are required"));
        }
        let rates = self.entry_missing.iter().chain(&self.view_missing).chain([&self.label_missing]);
        for &r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(BionicError::validation(format!("missing rate {r} outside [0, 1]")));
            }
        }
        if self.noise_precisions.iter().any(|&p| !(p > 0.0)) || !(self.tau > 0.0) || !(self.psi_t > 0.0) {
            return Err(BionicError::validation("precisions must be positive"));
        }
        Ok(())
    }
}

/// Latents and parameters behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub g: DMatrix<f64>,
    /// Per view, D × H.
    pub v: Vec<DMatrix<f64>>,
    /// Per view, D × K.
    pub w: Vec<DMatrix<f64>>,
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub vt: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub classes: Vec<usize>,
    /// Fully observed view values before any masking.
    pub complete: Vec<DMatrix<f64>>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let e: f64 = StandardNormal.sample(rng);
            m[(i, j)] = sd * e;
        }
    }
    m
}

fn add_noise(rng: &mut ChaCha8Rng, m: &mut DMatrix<f64>, precision: f64) {
    if precision.is_infinite() {
        return;
    }
    let noise = normal_matrix(rng, m.nrows(), m.ncols(), precision.powf(-0.5));
    *m += noise;
}

fn sample_class(rng: &mut ChaCha8Rng, logits: &[f64]) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (c, wc) in w.iter().enumerate() {
        if r < *wc {
            return c;
        }
        r -= wc;
    }
    w.len() - 1
}

/// Samples a complete dataset from the generative process (no missingness applied).
///
/// Classes are drawn from softmax(label_scale · t_n); with two classes this is
/// Bernoulli(σ(label_scale · (t_n1 − t_n0))).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(MultiViewDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, h, k, c) = (spec.n, spec.h_true, spec.k_true, spec.n_classes);
    let d_total: usize = spec.view_dims.iter().sum();

    let g = normal_matrix(&mut rng, n, h, 1.0);
    let mut v = Vec::new();
    let mut w = Vec::new();
    let mut complete = Vec::new();
    let w_sd = 1.0 / (d_total as f64).sqrt();
    for (m, &dm) in spec.view_dims.iter().enumerate() {
        let mut vm = normal_matrix(&mut rng, dm, h, 1.0);
        // Equal row norms give every feature the same variance, so per-feature
        // standardization keeps the noise isotropic.
        for mut row in vm.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row *= (h as f64).sqrt() / norm;
            }
        }
        let mut x = &g * vm.transpose();
        add_noise(&mut rng, &mut x, spec.noise_precisions[m]);
        v.push(vm);
        w.push(normal_matrix(&mut rng, dm, k, w_sd));
        complete.push(x);
    }
    let mut z = DMatrix::zeros(n, k);
    for (x, wm) in complete.iter().zip(&w) {
        z += x * wm;
    }
    add_noise(&mut rng, &mut z, spec.tau);
    let u = normal_matrix(&mut rng, c, k, 1.0);
    let vt = normal_matrix(&mut rng, c, h, 1.0 / (h as f64).sqrt());
    let mut t = &z * u.transpose() + &g * vt.transpose();
    add_noise(&mut rng, &mut t, spec.psi_t);
    let classes: Vec<usize> = (0..n)
        .map(|i| {
            let logits: Vec<f64> = t.row(i).iter().map(|v| spec.label_scale * v).collect();
            sample_class(&mut rng, &logits)
        })
        .collect();

    let specs: Vec<ViewSpec> = spec
        .view_dims
        .iter()
        .enumerate()
        .map(|(m, &dm)| ViewSpec::new(format!("view{m}"), spec.view_kinds[m], dm))
        .collect();
    let blocks = complete
        .iter()
        .map(|x| ViewBlock::from_values(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let labels = LabelBlock::from_classes(&classes.iter().map(|&c| Some(c)).collect::<Vec<_>>(), c)?;
    let d = MultiViewDataset::with_default_ids(specs, blocks, labels)?;
    Ok((
        d,
        GroundTruth {
            g,
            v,
            w,
            z,
            u,
            vt,
            t,
            classes,
            complete,
        },
    ))
}

/// Hides entries, whole view rows and labels completely at random.
///
/// Embedding views only lose whole rows. A sample left with no observed view has
/// one of its originally observed views restored, chosen among views whose row
/// rate is below one.
pub fn inject_missingness(d: &MultiViewDataset, spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    if spec.view_dims.len() != d.n_views() {
        return Err(BionicError::validation("spec and dataset disagree on the number of views"));
    }
    let restorable: Vec<usize> = (0..d.n_views())
        .filter(|&m| spec.view_missing[m] < 1.0 && (spec.entry_missing[m] < 1.0 || d.specs()[m].kind == ViewKind::Embedding))
        .collect();
    if restorable.is_empty() && d.n() > 0 {
        return Err(BionicError::validation(
            "missing rates leave no view that can keep every sample observed",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ MISSINGNESS_STREAM);
    let n = d.n();
    let mut masks: Vec<DMatrix<bool>> = d.blocks().iter().map(|b| b.mask().clone()).collect();
    for m in 0..d.n_views() {
        let structured = d.specs()[m].kind == ViewKind::Structured;
        for i in 0..n {
            let hide_row = rng.random::<f64>() < spec.view_missing[m];
            for j in 0..masks[m].ncols() {
                let hide_entry = structured && rng.random::<f64>() < spec.entry_missing[m];
                if hide_row || hide_entry {
                    masks[m][(i, j)] = false;
                }
            }
        }
    }
    for i in 0..n {
        let any = (0..d.n_views()).any(|m| masks[m].row(i).iter().any(|&b| b));
        if any {
            continue;
        }
        let mut options: Vec<usize> = restorable
            .iter()
            .copied()
            .filter(|&m| d.block(m).row_observed(i))
            .collect();
        if options.is_empty() {
            options = (0..d.n_views()).filter(|&m| d.block(m).row_observed(i)).collect();
        }
        let &m = options.choose(&mut rng).expect("input sample has an observed view");
        for j in 0..masks[m].ncols() {
            masks[m][(i, j)] = d.block(m).mask()[(i, j)];
        }
    }
    let blocks = d
        .blocks()
        .iter()
        .zip(masks)
        .map(|(b, mask)| ViewBlock::new(b.values().clone(), mask))
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<Option<usize>> = d
        .labels()
        .classes()
        .into_iter()
        .map(|c| if rng.random::<f64>() < spec.label_missing { None } else { c })
        .collect();
    let labels = LabelBlock::from_classes(&classes, d.n_classes())?;
    MultiViewDataset::new(d.specs().to_vec(), blocks, labels, d.ids().to_vec())
}

/// Exact posterior of g ~ N(0, I) given x ~ N(V g, ψ⁻¹ I), by dense LU solve.
pub fn oracle_latent_posterior(x: &DVector<f64>, v: &DMatrix<f64>, psi: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.len() != v.nrows() {
        return Err(BionicError::validation("x and V disagree in dimension"));
    }
    let h = v.ncols();
    let a = DMatrix::identity(h, h) + v.tr_mul(v) * psi;
    let lu = a.lu();
    let cov = lu
        .try_inverse()
        .ok_or_else(|| BionicError::numerical("singular posterior precision"))?;
    let rhs = v.tr_mul(x) * psi;
    let mean = lu
        .solve(&rhs)
        .ok_or_else(|| BionicError::numerical("singular posterior precision"))?;
    Ok((mean, cov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableSpec {
    pub n: usize,
    pub view_dims: Vec<usize>,
    /// Distance between class means in units of the within-class standard deviation.
    pub separation: f64,
    pub seed: u64,
}

/// Two unit-variance Gaussian clusters per view whose means differ by
/// `separation` along the diagonal direction. Classes alternate 0, 1, 0, …
pub fn oracle_separable(spec: &SeparableSpec) -> Result<MultiViewDataset> {
    if spec.view_dims.is_empty() || spec.view_dims.contains(&0) {
        return Err(BionicError::validation("views must have at least one feature"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes: Vec<usize> = (0..spec.n).map(|i| i % 2).collect();
    let mut specs = Vec::new();
    let mut blocks = Vec::new();
    for (m, &dm) in spec.view_dims.iter().enumerate() {
        let mut x = normal_matrix(&mut rng, spec.n, dm, 1.0);
        let shift = spec.separation / (dm as f64).sqrt();
        for (i, &c) in classes.iter().enumerate() {
            let sign = if c == 1 { 0.5 } else { -0.5 };
            x.row_mut(i).iter_mut().for_each(|v| *v += sign * shift);
        }
        specs.push(ViewSpec::new(format!("view{m}"), ViewKind::Structured, dm));
        blocks.push(ViewBlock::from_values(x)?);
    }
    let labels = LabelBlock::from_classes(&classes.iter().map(|&c| Some(c)).collect::<Vec<_>>(), 2)?;
    MultiViewDataset::with_default_ids(specs, blocks, labels)
}

/// Views of independent standard normal features with a binary label drawn from
/// σ(strength · ⟨x, β⟩ / ‖β‖), β a random direction over all concatenated features.
/// There is no shared low-rank structure, so only the discriminative pathway can
/// explain the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLabelSpec {
    pub n: usize,
    pub view_dims: Vec<usize>,
    pub strength: f64,
    pub seed: u64,
}

pub fn linear_label_synthetic(spec: &LinearLabelSpec) -> Result<MultiViewDataset> {
    if spec.view_dims.is_empty() || spec.view_dims.contains(&0) {
        return Err(BionicError::validation("views must have at least one feature"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let xs: Vec<DMatrix<f64>> = spec.view_dims.iter().map(|&dm| normal_matrix(&mut rng, spec.n, dm, 1.0)).collect();
    let betas: Vec<DVector<f64>> = spec.view_dims.iter().map(|&dm| normal_matrix(&mut rng, dm, 1, 1.0).column(0).into()).collect();
    let norm = betas.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
    let mut score = DVector::zeros(spec.n);
    for (x, b) in xs.iter().zip(&betas) {
        score += x * b;
    }
    let classes: Vec<Option<usize>> = score
        .iter()
        .map(|&v| {
            let p = 1.0 / (1.0 + (-spec.strength * v / norm).exp());
            Some(usize::from(rng.random::<f64>() < p))
        })
        .collect();
    let specs = (0..xs.len())
        .map(|m| ViewSpec::new(format!("view{m}"), ViewKind::Structured, spec.view_dims[m]))
        .collect();
    let blocks = xs.into_iter().map(ViewBlock::from_values).collect::<Result<Vec<_>>>()?;
    MultiViewDataset::with_default_ids(specs, blocks, LabelBlock::from_classes(&classes, 2)?)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Balanced accuracy of the Bayes rule for two unit-variance clusters `separation` apart.
pub fn bayes_optimal_bacc(separation: f64) -> f64 {
    normal_cdf(separation / 2.0)
}

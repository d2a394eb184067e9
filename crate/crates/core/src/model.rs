//! Hyperparameters, variational posterior families and the full model state.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dataset::{MultiViewDataset, ViewSpec};
use crate::error::{BionicError, Result};
use crate::linalg::{jj_lambda, min_eigenvalue};
use crate::preprocess::{PreprocessState, DEFAULT_VARIANCE_THRESHOLD};

/// Standard deviation of the initial loading means (variance 1e-2).
const INIT_LOADING_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Initial number of generative factors.
    pub h_init: usize,
    /// Discriminative factor count; `None` resolves to C − 1.
    pub k: Option<usize>,
    pub ard_shape: f64,
    pub ard_rate: f64,
    pub noise_shape: f64,
    pub noise_rate: f64,
    pub max_sweeps: usize,
    pub conv_window: usize,
    pub conv_tol: f64,
    pub prune_tol: f64,
    pub prune_every: usize,
    /// Sweeps during which the relevance precisions of W stay at their unit-mean
    /// starting value, so the discriminative pathway is not shrunk away before the
    /// noise precisions settle.
    pub ard_warmup: usize,
    pub variance_threshold: f64,
    pub seed: u64,
    /// Emit `sweep=… elbo=… active_h=…` progress lines on stderr.
    pub verbose: bool,
}

pub const DEFAULT_ARD_WARMUP: usize = 50;

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            h_init: 100,
            k: None,
            ard_shape: 1e-14,
            ard_rate: 1e-14,
            noise_shape: 1e-14,
            noise_rate: 1e-14,
            max_sweeps: 5000,
            conv_window: 100,
            conv_tol: 1e-8,
            prune_tol: 1e-6,
            prune_every: 100,
            ard_warmup: DEFAULT_ARD_WARMUP,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            seed: 0,
            verbose: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ard_shape", self.ard_shape),
            ("ard_rate", self.ard_rate),
            ("noise_shape", self.noise_shape),
            ("noise_rate", self.noise_rate),
            ("conv_tol", self.conv_tol),
            ("prune_tol", self.prune_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BionicError::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.h_init < 1 {
            return Err(BionicError::validation("h_init must be at least 1"));
        }
        if self.k == Some(0) {
            return Err(BionicError::validation("k must be at least 1"));
        }
        if self.max_sweeps < 1 || self.prune_every < 1 || self.conv_window < 1 {
            return Err(BionicError::validation("max_sweeps, prune_every and conv_window must be positive"));
        }
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return Err(BionicError::validation("variance_threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Discriminative dimensionality for a `n_classes`-class problem.
    pub fn resolve_k(&self, n_classes: usize) -> Result<usize> {
        let bound = n_classes.saturating_sub(1);
        let k = self.k.unwrap_or(bound);
        if k < 1 {
            return Err(BionicError::validation("discriminative dimension must be at least 1"));
        }
        if k > bound {
            return Err(BionicError::validation(format!(
                "k = {k} exceeds C - 1 = {bound} for a {n_classes}-class problem"
            )));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPosterior {
    pub fn new(shape: f64, rate: f64) -> Self {
        GammaPosterior { shape, rate }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// E[ln x] = ψ(shape) − ln(rate).
    pub fn ln_mean(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    /// KL(self ‖ Gamma(prior_shape, prior_rate)).
    pub fn kl_from_prior(&self, prior_shape: f64, prior_rate: f64) -> f64 {
        let (a, b) = (self.shape, self.rate);
        (a - prior_shape) * digamma(a) - ln_gamma(a) + ln_gamma(prior_shape) + prior_shape * (b.ln() - prior_rate.ln())
            + a * (prior_rate - b) / b
    }

    pub fn is_valid(&self) -> bool {
        self.shape > 0.0 && self.rate > 0.0 && self.mean().is_finite() && self.mean() > 0.0
    }
}

/// Gaussian over the rows of a matrix: row `r` is N(mean[r,:], covs[cov_index[r]]).
///
/// Rows that share an observation pattern share one covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowGaussianMatrix {
    pub mean: DMatrix<f64>,
    pub covs: Vec<DMatrix<f64>>,
    pub cov_index: Vec<usize>,
}

/// Per-sample latent posteriors share the row-Gaussian layout (rows are samples).
pub type PerSampleGaussian = RowGaussianMatrix;

impl RowGaussianMatrix {
    pub fn with_shared_cov(mean: DMatrix<f64>, cov: DMatrix<f64>) -> Self {
        let rows = mean.nrows();
        RowGaussianMatrix {
            mean,
            covs: vec![cov],
            cov_index: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn cov(&self, row: usize) -> &DMatrix<f64> {
        &self.covs[self.cov_index[row]]
    }

    /// Σ_r E[x_r x_rᵀ] over all rows.
    pub fn second_moment_sum(&self) -> DMatrix<f64> {
        let mut s = self.mean.transpose() * &self.mean;
        for (g, count) in self.group_counts().into_iter().enumerate() {
            if count > 0 {
                let w = count as f64;
                s.zip_apply(&self.covs[g], |a, b| *a += w * b);
            }
        }
        s
    }

    /// Σ_r E[x_r²] per column.
    pub fn column_second_moments(&self) -> DVector<f64> {
        let counts = self.group_counts();
        DVector::from_fn(self.dim(), |h, _| {
            let means: f64 = self.mean.column(h).iter().map(|v| v * v).sum();
            let vars: f64 = counts
                .iter()
                .enumerate()
                .map(|(g, &c)| c as f64 * self.covs[g][(h, h)])
                .sum();
            means + vars
        })
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.covs.len()];
        for &g in &self.cov_index {
            counts[g] += 1;
        }
        counts
    }

    /// Restriction to a subset of latent columns.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        RowGaussianMatrix {
            mean: crate::linalg::select_columns(&self.mean, cols),
            covs: self.covs.iter().map(|c| crate::linalg::select(c, cols, cols)).collect(),
            cov_index: self.cov_index.clone(),
        }
    }
}

/// Column-factorized Gaussian for discriminative loadings of one view.
///
/// Column k has covariance `(prior_prec[k]·I + scale·G)⁻¹` where `G = basis·diag(eigs)·basisᵀ`
/// is the fixed Gram matrix of the view's (zero-filled) inputs, so only the
/// two precision scalars change between updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralColumnGaussian {
    pub mean: DMatrix<f64>,
    pub basis: DMatrix<f64>,
    pub eigs: DVector<f64>,
    pub prior_prec: DVector<f64>,
    pub scale: f64,
}

impl SpectralColumnGaussian {
    pub fn from_gram(mean: DMatrix<f64>, gram: DMatrix<f64>) -> Self {
        let k = mean.ncols();
        let eig = SymmetricEigen::new(gram);
        SpectralColumnGaussian {
            mean,
            basis: eig.eigenvectors,
            eigs: eig.eigenvalues.map(|v| v.max(0.0)),
            prior_prec: DVector::from_element(k, 1.0),
            scale: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn cols(&self) -> usize {
        self.mean.ncols()
    }

    /// Eigenvalues of column k's covariance in the Gram eigenbasis.
    pub fn cov_spectrum(&self, k: usize) -> DVector<f64> {
        self.eigs.map(|l| 1.0 / (self.prior_prec[k] + self.scale * l))
    }

    pub fn cov(&self, k: usize) -> DMatrix<f64> {
        let s = self.cov_spectrum(k);
        let mut scaled = self.basis.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= s[j];
        }
        scaled * self.basis.transpose()
    }

    pub fn logdet(&self, k: usize) -> f64 {
        self.cov_spectrum(k).iter().map(|v| v.ln()).sum()
    }

    pub fn trace(&self, k: usize) -> f64 {
        self.cov_spectrum(k).sum()
    }

    /// tr(Σ_k · G).
    pub fn trace_with_gram(&self, k: usize) -> f64 {
        self.eigs
            .iter()
            .map(|&l| l / (self.prior_prec[k] + self.scale * l))
            .sum()
    }

    /// xᵀ Σ_k x.
    pub fn quad_form(&self, k: usize, x: &DVector<f64>) -> f64 {
        let proj = self.basis.tr_mul(x);
        let s = self.cov_spectrum(k);
        proj.iter().zip(s.iter()).map(|(p, v)| p * p * v).sum()
    }
}

/// Independent univariate Gaussians, one per matrix entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub hyper: Hyperparams,
    pub preprocess: PreprocessState,
    /// View specs in preprocessed coordinates.
    pub specs: Vec<ViewSpec>,
    pub n_classes: usize,
    pub k: usize,
    pub active_h: usize,
    pub qg: PerSampleGaussian,
    pub qz: PerSampleGaussian,
    pub qt: DiagGaussian,
    pub qv: Vec<RowGaussianMatrix>,
    pub qw: Vec<SpectralColumnGaussian>,
    /// C × K.
    pub qu: RowGaussianMatrix,
    /// C × H.
    pub qvt: RowGaussianMatrix,
    pub ard_v: Vec<Vec<GammaPosterior>>,
    pub ard_w: Vec<Vec<GammaPosterior>>,
    /// Per-view noise precision ψ_m.
    pub noise: Vec<GammaPosterior>,
    /// Precision of the discriminative latent around its regression mean.
    pub tau: GammaPosterior,
    /// Precision of the output-view noise.
    pub psi_t: GammaPosterior,
    /// Jaakkola–Jordan bound parameters, N × C.
    pub xi: DMatrix<f64>,
    pub elbo_trace: Vec<f64>,
    /// Completed coordinate sweeps.
    #[serde(default)]
    pub sweeps: usize,
    /// Trace indices `t` such that factors were pruned between entries `t` and `t + 1`.
    pub prune_marks: Vec<usize>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let normal = Normal::new(0.0, INIT_LOADING_SD).expect("valid sd");
    // Row-major draw order so the stream does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = normal.sample(rng);
        }
    }
    m
}

/// Zero-filled copy of a preprocessed view: unobserved entries become 0, the training mean.
pub fn zero_filled(d: &MultiViewDataset, m: usize) -> DMatrix<f64> {
    let b = d.block(m);
    DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| if b.mask()[(i, j)] { b.values()[(i, j)] } else { 0.0 })
}

/// Principal scores of each view, averaged over the views available for a sample,
/// then standardized per column.
fn initial_latent_means(d: &MultiViewDataset, h: usize) -> DMatrix<f64> {
    let n = d.n();
    let mut acc = DMatrix::zeros(n, h);
    let mut counts = vec![0usize; n];
    for m in 0..d.n_views() {
        let x = zero_filled(d, m);
        if n == 0 {
            continue;
        }
        let svd = x.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let r = order.len().min(h);
        for i in 0..n {
            if !d.block(m).row_observed(i) {
                continue;
            }
            counts[i] += 1;
            for (c, &src) in order.iter().take(r).enumerate() {
                acc[(i, c)] += u[(i, src)] * svd.singular_values[src];
            }
        }
    }
    for i in 0..n {
        if counts[i] > 1 {
            let c = counts[i] as f64;
            acc.row_mut(i).iter_mut().for_each(|v| *v /= c);
        }
    }
    if n > 1 {
        for mut col in acc.column_iter_mut() {
            let mu = col.mean();
            let sd = (col.iter().map(|v: &f64| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            for v in col.iter_mut() {
                *v -= mu;
                if sd > 0.0 {
                    *v /= sd;
                }
            }
        }
    }
    acc
}

/// Ridge penalty of the label-driven initialization of the discriminative loadings.
const INIT_RIDGE: f64 = 1.0;

/// Initial output-view means: the q(t) update at zero prior mean and ξ = 1 for
/// labeled samples, zero otherwise.
fn initial_output_means(d: &MultiViewDataset) -> DMatrix<f64> {
    let labels = d.labels();
    let prec = 1.0 + 2.0 * jj_lambda(1.0);
    DMatrix::from_fn(d.n(), d.n_classes(), |i, c| {
        if labels.label_mask()[i] {
            (labels.onehot()[(i, c)] - 0.5) / prec
        } else {
            0.0
        }
    })
}

/// Label-driven start for the discriminative pathway.
///
/// Ridge-regresses the initial output means on the concatenated inputs, keeps the
/// leading K directions of the fitted values, and scales them to unit variance.
/// Returns per-view W means and U, or `None` when the labels carry no signal.
fn discriminative_init(xs: &[DMatrix<f64>], t0: &DMatrix<f64>, k: usize) -> Option<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let n = t0.nrows();
    if n < 2 || t0.iter().all(|v| *v == 0.0) {
        return None;
    }
    let dims: Vec<usize> = xs.iter().map(|x| x.ncols()).collect();
    let total: usize = dims.iter().sum();
    let mut f = DMatrix::zeros(n, total);
    let mut off = 0;
    for x in xs {
        f.view_mut((0, off), (n, x.ncols())).copy_from(x);
        off += x.ncols();
    }
    let b = if total <= n {
        let a = f.tr_mul(&f) + DMatrix::identity(total, total) * INIT_RIDGE;
        a.cholesky()?.solve(&f.tr_mul(t0))
    } else {
        let a = &f * f.transpose() + DMatrix::identity(n, n) * INIT_RIDGE;
        f.tr_mul(&a.cholesky()?.solve(t0))
    };
    let fitted = &f * &b;
    let svd = fitted.clone().svd(false, true);
    let vt = svd.v_t?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &c| svd.singular_values[c].total_cmp(&svd.singular_values[a]).then(a.cmp(&c)));
    let mut w_all = DMatrix::zeros(total, k);
    for (j, &src) in order.iter().take(k).enumerate() {
        let dir = vt.row(src).transpose();
        let col = &b * &dir;
        let z = &f * &col;
        let mu = z.mean();
        let sd = (z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        if !(sd > 1e-12) {
            return None;
        }
        w_all.set_column(j, &(col / sd));
    }
    let z = &f * &w_all;
    let gram = z.tr_mul(&z) + DMatrix::identity(k, k) * 1e-8;
    let u = gram.cholesky()?.solve(&z.tr_mul(t0)).transpose();
    let mut ws = Vec::with_capacity(xs.len());
    let mut off = 0;
    for dm in dims {
        ws.push(w_all.rows(off, dm).into_owned());
        off += dm;
    }
    Some((ws, u))
}

/// Builds a fresh state for a preprocessed dataset. Deterministic in `(d, h.seed)`.
pub fn init_model(d: &MultiViewDataset, p: PreprocessState, h: &Hyperparams) -> Result<ModelState> {
    h.validate()?;
    let n = d.n();
    let c = d.n_classes();
    let k = h.resolve_k(c)?;
    let hh = h.h_init;
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);

    let xs: Vec<DMatrix<f64>> = (0..d.n_views()).map(|m| zero_filled(d, m)).collect();
    let t0 = initial_output_means(d);
    let mut qv = Vec::with_capacity(d.n_views());
    let mut w_random = Vec::with_capacity(d.n_views());
    for m in 0..d.n_views() {
        let dm = d.specs()[m].dim;
        let v_mean = random_matrix(&mut rng, dm, hh);
        qv.push(RowGaussianMatrix::with_shared_cov(v_mean, DMatrix::identity(hh, hh)));
        w_random.push(random_matrix(&mut rng, dm, k));
    }
    let u_random = random_matrix(&mut rng, c, k);
    let qvt = RowGaussianMatrix::with_shared_cov(random_matrix(&mut rng, c, hh), DMatrix::identity(hh, hh));
    let (w_means, u_mean) = discriminative_init(&xs, &t0, k).unwrap_or((w_random, u_random));

    let mut z_mean = DMatrix::zeros(n, k);
    let mut qw = Vec::with_capacity(d.n_views());
    for (x, w) in xs.iter().zip(w_means) {
        z_mean += x * &w;
        qw.push(SpectralColumnGaussian::from_gram(w, x.tr_mul(x)));
    }
    let qu = RowGaussianMatrix::with_shared_cov(u_mean, DMatrix::identity(k, k));

    let ard = GammaPosterior::new(h.ard_shape, h.ard_rate);
    let unit = GammaPosterior::new(1.0, 1.0);
    let noise = GammaPosterior::new(h.noise_shape, h.noise_rate);
    Ok(ModelState {
        hyper: h.clone(),
        preprocess: p,
        specs: d.specs().to_vec(),
        n_classes: c,
        k,
        active_h: hh,
        qg: RowGaussianMatrix::with_shared_cov(initial_latent_means(d, hh), DMatrix::identity(hh, hh)),
        qz: RowGaussianMatrix::with_shared_cov(z_mean, DMatrix::identity(k, k)),
        qt: DiagGaussian {
            mean: t0,
            var: DMatrix::from_element(n, c, 1.0),
        },
        qv,
        qw,
        qu,
        qvt,
        ard_v: vec![vec![ard; hh]; d.n_views()],
        ard_w: vec![vec![unit; k]; d.n_views()],
        noise: vec![noise; d.n_views()],
        tau: noise,
        psi_t: noise,
        xi: DMatrix::from_element(n, c, 1.0),
        elbo_trace: Vec::new(),
        sweeps: 0,
        prune_marks: Vec::new(),
    })
}

impl ModelState {
    pub fn n_views(&self) -> usize {
        self.specs.len()
    }

    pub fn n_samples(&self) -> usize {
        self.qg.rows()
    }

    /// Checks shapes, covariance symmetry/definiteness and Gamma validity.
    pub fn check_invariants(&self) -> Result<()> {
        let h = self.active_h;
        let bad = |msg: String| Err(BionicError::numerical(msg));
        if self.qg.dim() != h || self.qvt.dim() != h {
            return bad(format!("generative width inconsistent with active_h = {h}"));
        }
        for m in 0..self.n_views() {
            let dm = self.specs[m].dim;
            if self.qv[m].mean.shape() != (dm, h) || self.ard_v[m].len() != h {
                return bad(format!("view {m} generative loadings have wrong shape"));
            }
            if self.qw[m].mean.shape() != (dm, self.k) {
                return bad(format!("view {m} discriminative loadings have wrong shape"));
            }
        }
        let mut covs: Vec<&DMatrix<f64>> = Vec::new();
        covs.extend(self.qg.covs.iter());
        covs.extend(self.qz.covs.iter());
        covs.extend(self.qu.covs.iter());
        covs.extend(self.qvt.covs.iter());
        for q in &self.qv {
            covs.extend(q.covs.iter());
        }
        for c in covs {
            let asym = (c - c.transpose()).abs().max();
            if asym > 1e-10 {
                return bad(format!("covariance asymmetric by {asym}"));
            }
            if c.nrows() > 0 && min_eigenvalue(c) <= -1e-10 {
                return bad("covariance not positive semi-definite".to_string());
            }
        }
        let gammas = self
            .ard_v
            .iter()
            .chain(self.ard_w.iter())
            .flatten()
            .chain(self.noise.iter())
            .chain([&self.tau, &self.psi_t]);
        for g in gammas {
            if !g.is_valid() {
                return bad(format!("invalid Gamma posterior {g:?}"));
            }
        }
        if self.qt.var.iter().any(|v| !(*v > 0.0)) {
            return bad("non-positive output-view variance".to_string());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_kl_zero_against_itself() {
        let g = GammaPosterior::new(3.5, 0.7);
        assert!(g.kl_from_prior(3.5, 0.7).abs() < 1e-12);
        assert!(GammaPosterior::new(2.0, 1.0).kl_from_prior(1.0, 1.0) > 0.0);
    }

    #[test]
    fn gamma_ln_mean_of_unit_shape() {
        let g = GammaPosterior::new(1.0, 1.0);
        assert!((g.ln_mean() + 0.5772156649015329).abs() < 1e-12);
    }

    #[test]
    fn k_bound() {
        let h = Hyperparams::default();
        assert_eq!(h.resolve_k(2).unwrap(), 1);
        assert_eq!(h.resolve_k(4).unwrap(), 3);
        let h = Hyperparams { k: Some(2), ..Hyperparams::default() };
        assert!(h.resolve_k(2).is_err());
    }

    #[test]
    fn spectral_cov_matches_dense_inverse() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, 2.0, 0.3, 0.0, 2.0, -1.0]);
        let gram = x.tr_mul(&x);
        let mut q = SpectralColumnGaussian::from_gram(DMatrix::zeros(2, 1), gram.clone());
        q.prior_prec[0] = 0.7;
        q.scale = 1.9;
        let dense = (DMatrix::identity(2, 2) * 0.7 + &gram * 1.9).try_inverse().unwrap();
        assert!((q.cov(0) - &dense).abs().max() < 1e-12);
        assert!((q.logdet(0) - dense.determinant().ln()).abs() < 1e-12);
        assert!((q.trace_with_gram(0) - (&dense * &gram).trace()).abs() < 1e-12);
        let v = DVector::from_vec(vec![0.4, -1.2]);
        assert!((q.quad_form(0, &v) - (v.transpose() * &dense * &v)[0]).abs() < 1e-12);
    }
}

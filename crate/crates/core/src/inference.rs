//! Coordinate-ascent mean-field variational inference.
//!
//! All updates work in preprocessed coordinates with unobserved entries zero-filled
//! (zero is the training mean there). Zero-filling makes every first-order sufficient
//! statistic automatically skip missing entries; second-order statistics are
//! restricted explicitly through observation patterns.
//!
//! One sweep updates, in order: q(g), q(V⁽ᵐ⁾) for every view, q(V⁽ᵀ⁾), q(z), q(W⁽ᵐ⁾)
//! for every view, q(U), q(t), the bound parameters ξ, the ARD precisions, and the
//! noise precisions.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{subset, validate_dataset, MultiViewDataset};
use crate::error::{BionicError, Result};
use crate::linalg::{frobenius_dot, jj_lambda, log_sigmoid, spd_inverse, spd_logdet, trace_of_product};
use crate::model::{init_model, zero_filled, GammaPosterior, Hyperparams, ModelState, RowGaussianMatrix};
use crate::preprocess::{apply_preprocess, fit_preprocess};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionRegime {
    /// Labeled training rows only.
    S,
    /// Labeled and unlabeled training rows.
    SS,
    /// Training rows plus test inputs with their labels hidden.
    TSS,
}

impl SupervisionRegime {
    pub const ALL: [SupervisionRegime; 3] = [SupervisionRegime::S, SupervisionRegime::SS, SupervisionRegime::TSS];

    pub fn as_str(&self) -> &'static str {
        match self {
            SupervisionRegime::S => "S",
            SupervisionRegime::SS => "SS",
            SupervisionRegime::TSS => "TSS",
        }
    }
}

impl std::str::FromStr for SupervisionRegime {
    type Err = BionicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(SupervisionRegime::S),
            "ss" => Ok(SupervisionRegime::SS),
            "tss" => Ok(SupervisionRegime::TSS),
            other => Err(BionicError::validation(format!("unknown regime '{other}'"))),
        }
    }
}

/// Which features of a view a sample observes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ViewObs {
    None,
    All,
    Some(Vec<usize>),
}

#[derive(Debug, Clone)]
struct FeatureGroup {
    features: Vec<usize>,
    /// Samples observing every feature of the group; `None` means all samples.
    samples: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct PreparedView {
    x: DMatrix<f64>,
    groups: Vec<FeatureGroup>,
    group_of: Vec<usize>,
    n_obs: usize,
    x_sq: f64,
}

#[derive(Debug, Clone)]
struct SamplePattern {
    members: Vec<usize>,
    views: Vec<ViewObs>,
}

/// Fit-time view of a preprocessed dataset: zero-filled inputs and observation
/// patterns grouped for shared covariances.
#[derive(Debug, Clone)]
pub struct Prepared {
    n: usize,
    views: Vec<PreparedView>,
    patterns: Vec<SamplePattern>,
    pattern_of: Vec<usize>,
    onehot: DMatrix<f64>,
    labeled: Vec<bool>,
}

impl Prepared {
    pub fn new(d: &MultiViewDataset) -> Self {
        let n = d.n();
        let mut views = Vec::with_capacity(d.n_views());
        for m in 0..d.n_views() {
            let block = d.block(m);
            let dm = block.ncols();
            let x = zero_filled(d, m);
            let mut keys: HashMap<Vec<bool>, usize> = HashMap::new();
            let mut groups: Vec<FeatureGroup> = Vec::new();
            let mut group_of = Vec::with_capacity(dm);
            for j in 0..dm {
                let col: Vec<bool> = (0..n).map(|i| block.mask()[(i, j)]).collect();
                let next = groups.len();
                let g = *keys.entry(col.clone()).or_insert(next);
                if g == next {
                    let samples = if col.iter().all(|&b| b) {
                        None
                    } else {
                        Some((0..n).filter(|&i| col[i]).collect())
                    };
                    groups.push(FeatureGroup {
                        features: Vec::new(),
                        samples,
                    });
                }
                groups[g].features.push(j);
                group_of.push(g);
            }
            let n_obs = block.mask().iter().filter(|&&b| b).count();
            let x_sq = x.iter().map(|v| v * v).sum();
            views.push(PreparedView {
                x,
                groups,
                group_of,
                n_obs,
                x_sq,
            });
        }

        let mut keys: HashMap<Vec<ViewObs>, usize> = HashMap::new();
        let mut patterns: Vec<SamplePattern> = Vec::new();
        let mut pattern_of = Vec::with_capacity(n);
        for i in 0..n {
            let obs: Vec<ViewObs> = (0..d.n_views())
                .map(|m| {
                    let b = d.block(m);
                    let seen: Vec<usize> = (0..b.ncols()).filter(|&j| b.mask()[(i, j)]).collect();
                    if seen.is_empty() {
                        ViewObs::None
                    } else if seen.len() == b.ncols() {
                        ViewObs::All
                    } else {
                        ViewObs::Some(seen)
                    }
                })
                .collect();
            let next = patterns.len();
            let p = *keys.entry(obs.clone()).or_insert(next);
            if p == next {
                patterns.push(SamplePattern {
                    members: Vec::new(),
                    views: obs,
                });
            }
            patterns[p].members.push(i);
            pattern_of.push(p);
        }
        Prepared {
            n,
            views,
            patterns,
            pattern_of,
            onehot: d.labels().onehot().clone(),
            labeled: d.labels().label_mask().to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }
}

/// Σ over the listed rows of E[v vᵀ].
pub fn row_second_moment(q: &RowGaussianMatrix, rows: &[usize]) -> DMatrix<f64> {
    let selected = q.mean.select_rows(rows);
    let mut s = selected.transpose() * &selected;
    // Count only the covariances these rows use; there can be one per row.
    let mut groups: Vec<usize> = rows.iter().map(|&r| q.cov_index[r]).collect();
    groups.sort_unstable();
    for run in groups.chunk_by(|a, b| a == b) {
        let w = run.len() as f64;
        s.zip_apply(&q.covs[run[0]], |a, b| *a += w * b);
    }
    s
}

/// E[v_d v_dᵀ] for every row d.
fn row_moments(q: &RowGaussianMatrix) -> Vec<DMatrix<f64>> {
    (0..q.rows())
        .map(|r| {
            let v = q.mean.row(r);
            v.transpose() * v + q.cov(r)
        })
        .collect()
}

/// Σ over observed features of E[v_d v_dᵀ] for one sample pattern and view.
fn loading_moment(rows_mom: &[DMatrix<f64>], full: &DMatrix<f64>, obs: &ViewObs) -> Option<DMatrix<f64>> {
    match obs {
        ViewObs::None => None,
        ViewObs::All => Some(full.clone()),
        ViewObs::Some(rows) => {
            let mut s = DMatrix::zeros(full.nrows(), full.ncols());
            for &r in rows {
                s += &rows_mom[r];
            }
            Some(s)
        }
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(BionicError::numerical(format!("non-finite value in {what}")))
    }
}

fn diag_from_gammas(g: &[GammaPosterior]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(g.len(), g.iter().map(|a| a.mean())))
}

/// Σ_m X_m E[W_m] (N × K).
fn discriminative_inputs(s: &ModelState, prep: &Prepared) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(prep.n, s.k);
    for (v, q) in prep.views.iter().zip(&s.qw) {
        f += &v.x * &q.mean;
    }
    f
}

pub fn update_g(s: &mut ModelState, prep: &Prepared) -> Result<()> {
    let h = s.active_h;
    let psi_t = s.psi_t.mean();
    let full: Vec<DMatrix<f64>> = s.qv.iter().map(|q| q.second_moment_sum()).collect();
    let per_row: Vec<Vec<DMatrix<f64>>> = s.qv.iter().map(row_moments).collect();
    let vt_mom = s.qvt.second_moment_sum();

    let resid_t = &s.qt.mean - &s.qz.mean * s.qu.mean.transpose();
    let mut b = &resid_t * &s.qvt.mean * psi_t;
    for (m, v) in prep.views.iter().enumerate() {
        b += &v.x * &s.qv[m].mean * s.noise[m].mean();
    }

    let mut covs = Vec::with_capacity(prep.patterns.len());
    let mut mean = DMatrix::zeros(prep.n, h);
    for pat in &prep.patterns {
        let mut prec = DMatrix::identity(h, h) + &vt_mom * psi_t;
        for (m, obs) in pat.views.iter().enumerate() {
            if let Some(a) = loading_moment(&per_row[m], &full[m], obs) {
                prec += a * s.noise[m].mean();
            }
        }
        let cov = spd_inverse(&prec)?.inverse;
        for &i in &pat.members {
            let mu = &cov * b.row(i).transpose();
            mean.set_row(i, &mu.transpose());
        }
        covs.push(cov);
    }
    check_finite(&mean, "q(g) mean")?;
    s.qg = RowGaussianMatrix {
        mean,
        covs,
        cov_index: prep.pattern_of.clone(),
    };
    Ok(())
}

/// Σ over the listed samples of E[g gᵀ], or over all samples for `None`.
fn latent_moment(s: &ModelState, samples: Option<&Vec<usize>>, all: &DMatrix<f64>) -> DMatrix<f64> {
    match samples {
        None => all.clone(),
        Some(rows) => row_second_moment(&s.qg, rows),
    }
}

pub fn update_v(s: &mut ModelState, prep: &Prepared, m: usize) -> Result<()> {
    let v = &prep.views[m];
    let psi = s.noise[m].mean();
    let alpha = diag_from_gammas(&s.ard_v[m]);
    let all = s.qg.second_moment_sum();
    let xg = v.x.transpose() * &s.qg.mean * psi;
    let h = s.active_h;
    let mut mean = DMatrix::zeros(v.x.ncols(), h);
    let mut covs = Vec::with_capacity(v.groups.len());
    for g in &v.groups {
        let prec = &alpha + latent_moment(s, g.samples.as_ref(), &all) * psi;
        let cov = spd_inverse(&prec)?.inverse;
        for &d in &g.features {
            let mu = &cov * xg.row(d).transpose();
            mean.set_row(d, &mu.transpose());
        }
        covs.push(cov);
    }
    check_finite(&mean, "q(V) mean")?;
    s.qv[m] = RowGaussianMatrix {
        mean,
        covs,
        cov_index: v.group_of.clone(),
    };
    Ok(())
}

pub fn update_vt(s: &mut ModelState, _prep: &Prepared) -> Result<()> {
    let psi_t = s.psi_t.mean();
    let prec = DMatrix::identity(s.active_h, s.active_h) + s.qg.second_moment_sum() * psi_t;
    let cov = spd_inverse(&prec)?.inverse;
    let resid = &s.qt.mean - &s.qz.mean * s.qu.mean.transpose();
    let mean = resid.transpose() * &s.qg.mean * &cov * psi_t;
    check_finite(&mean, "q(V_T) mean")?;
    s.qvt = RowGaussianMatrix::with_shared_cov(mean, cov);
    Ok(())
}

pub fn update_z(s: &mut ModelState, prep: &Prepared) -> Result<()> {
    let tau = s.tau.mean();
    let psi_t = s.psi_t.mean();
    let prec = DMatrix::identity(s.k, s.k) * tau + s.qu.second_moment_sum() * psi_t;
    let cov = spd_inverse(&prec)?.inverse;
    let f = discriminative_inputs(s, prep);
    let resid = &s.qt.mean - &s.qg.mean * s.qvt.mean.transpose();
    let mean = (f * tau + resid * &s.qu.mean * psi_t) * &cov;
    check_finite(&mean, "q(z) mean")?;
    s.qz = RowGaussianMatrix::with_shared_cov(mean, cov);
    Ok(())
}

pub fn update_w(s: &mut ModelState, prep: &Prepared, m: usize) -> Result<()> {
    let tau = s.tau.mean();
    let mut other = DMatrix::zeros(prep.n, s.k);
    for (j, v) in prep.views.iter().enumerate() {
        if j != m {
            other += &v.x * &s.qw[j].mean;
        }
    }
    let target = &s.qz.mean - other;
    let rhs = prep.views[m].x.transpose() * &target * tau;
    let q = &mut s.qw[m];
    q.scale = tau;
    for k in 0..s.k {
        q.prior_prec[k] = s.ard_w[m][k].mean();
        let spectrum = q.cov_spectrum(k);
        let proj = q.basis.tr_mul(&rhs.column(k));
        let col = &q.basis * proj.component_mul(&spectrum);
        q.mean.set_column(k, &col);
    }
    check_finite(&q.mean, "q(W) mean")
}

pub fn update_u(s: &mut ModelState, _prep: &Prepared) -> Result<()> {
    let psi_t = s.psi_t.mean();
    let prec = DMatrix::identity(s.k, s.k) + s.qz.second_moment_sum() * psi_t;
    let cov = spd_inverse(&prec)?.inverse;
    let resid = &s.qt.mean - &s.qg.mean * s.qvt.mean.transpose();
    let mean = resid.transpose() * &s.qz.mean * &cov * psi_t;
    check_finite(&mean, "q(U) mean")?;
    s.qu = RowGaussianMatrix::with_shared_cov(mean, cov);
    Ok(())
}

/// Prior mean of the output view, E[z]E[U]ᵀ + E[g]E[V_T]ᵀ (N × C).
fn output_prior_mean(s: &ModelState) -> DMatrix<f64> {
    &s.qz.mean * s.qu.mean.transpose() + &s.qg.mean * s.qvt.mean.transpose()
}

pub fn update_t(s: &mut ModelState, prep: &Prepared) -> Result<()> {
    let psi_t = s.psi_t.mean();
    let prior = output_prior_mean(s);
    let c = s.n_classes;
    for i in 0..prep.n {
        for j in 0..c {
            if prep.labeled[i] {
                let prec = psi_t + 2.0 * jj_lambda(s.xi[(i, j)]);
                s.qt.var[(i, j)] = 1.0 / prec;
                s.qt.mean[(i, j)] = (psi_t * prior[(i, j)] + prep.onehot[(i, j)] - 0.5) / prec;
            } else {
                s.qt.var[(i, j)] = 1.0 / psi_t;
                s.qt.mean[(i, j)] = prior[(i, j)];
            }
        }
    }
    check_finite(&s.qt.mean, "q(t) mean")
}

/// Sets ξ² = E[t²] for labeled samples; unlabeled entries are left untouched.
pub fn update_xi(s: &mut ModelState, prep: &Prepared) {
    for i in 0..prep.n {
        if !prep.labeled[i] {
            continue;
        }
        for j in 0..s.n_classes {
            let mu = s.qt.mean[(i, j)];
            s.xi[(i, j)] = (mu * mu + s.qt.var[(i, j)]).sqrt();
        }
    }
}

fn gamma_update(prior_shape: f64, prior_rate: f64, count: f64, sq: f64) -> GammaPosterior {
    GammaPosterior::new(prior_shape + 0.5 * count, prior_rate + 0.5 * sq)
}

/// Relevance precision updates. During the first `ard_warmup` sweeps the W
/// precisions are held fixed.
pub fn update_ard(s: &mut ModelState) {
    let (a0, b0) = (s.hyper.ard_shape, s.hyper.ard_rate);
    let warming_up = s.sweeps < s.hyper.ard_warmup;
    for m in 0..s.n_views() {
        let rows = s.qv[m].rows() as f64;
        let mom = s.qv[m].column_second_moments();
        s.ard_v[m] = mom.iter().map(|&v| gamma_update(a0, b0, rows, v)).collect();
        if !warming_up {
            let q = &s.qw[m];
            let d = q.dim() as f64;
            s.ard_w[m] = (0..s.k)
                .map(|k| gamma_update(a0, b0, d, q.mean.column(k).norm_squared() + q.trace(k)))
                .collect();
        }
    }
}

/// Expected squared residuals of every Gaussian likelihood term.
#[derive(Debug, Clone)]
pub struct ExpectedErrors {
    /// Per view: Σ over observed entries of E[(x − vᵀg)²].
    pub view: Vec<f64>,
    /// Σ_n E‖z_n − Σ_m W_mᵀ x_n‖².
    pub latent: f64,
    /// Σ_n E‖t_n − U z_n − V_T g_n‖².
    pub output: f64,
}

pub fn expected_errors(s: &ModelState, prep: &Prepared) -> ExpectedErrors {
    let n = prep.n as f64;
    let mut view = Vec::with_capacity(prep.views.len());
    let pattern_moments: Vec<DMatrix<f64>> = prep
        .patterns
        .iter()
        .map(|pat| row_second_moment(&s.qg, &pat.members))
        .collect();
    for (m, v) in prep.views.iter().enumerate() {
        let full = s.qv[m].second_moment_sum();
        let per_row = row_moments(&s.qv[m]);
        let cross = frobenius_dot(&v.x, &(&s.qg.mean * s.qv[m].mean.transpose()));
        let mut quad = 0.0;
        for (pat, mom) in prep.patterns.iter().zip(&pattern_moments) {
            if let Some(a) = loading_moment(&per_row, &full, &pat.views[m]) {
                quad += trace_of_product(&a, mom);
            }
        }
        view.push(v.x_sq - 2.0 * cross + quad);
    }

    let f = discriminative_inputs(s, prep);
    let mut w_var = 0.0;
    for q in &s.qw {
        for k in 0..s.k {
            w_var += q.trace_with_gram(k);
        }
    }
    let latent = s.qz.mean.norm_squared() + n * s.qz.covs[0].trace() - 2.0 * frobenius_dot(&s.qz.mean, &f)
        + f.norm_squared()
        + w_var;

    let zu = &s.qz.mean * s.qu.mean.transpose();
    let gv = &s.qg.mean * s.qvt.mean.transpose();
    let t_sq: f64 = s.qt.mean.iter().map(|v| v * v).sum::<f64>() + s.qt.var.sum();
    let output = t_sq - 2.0 * frobenius_dot(&s.qt.mean, &(&zu + &gv))
        + trace_of_product(&s.qu.second_moment_sum(), &s.qz.second_moment_sum())
        + trace_of_product(&s.qvt.second_moment_sum(), &s.qg.second_moment_sum())
        + 2.0 * frobenius_dot(&zu, &gv);
    ExpectedErrors { view, latent, output }
}

pub fn update_noise(s: &mut ModelState, prep: &Prepared) {
    let (a0, b0) = (s.hyper.noise_shape, s.hyper.noise_rate);
    let e = expected_errors(s, prep);
    for (m, v) in prep.views.iter().enumerate() {
        s.noise[m] = gamma_update(a0, b0, v.n_obs as f64, e.view[m]);
    }
    let n = prep.n as f64;
    s.tau = gamma_update(a0, b0, n * s.k as f64, e.latent);
    s.psi_t = gamma_update(a0, b0, n * s.n_classes as f64, e.output);
}

/// One full update cycle in the fixed order.
pub fn coordinate_sweep(s: &mut ModelState, prep: &Prepared) -> Result<()> {
    if prep.views.len() != s.n_views() || prep.n != s.n_samples() {
        return Err(BionicError::validation("prepared data does not match model state"));
    }
    update_g(s, prep)?;
    for m in 0..s.n_views() {
        update_v(s, prep, m)?;
    }
    update_vt(s, prep)?;
    update_z(s, prep)?;
    for m in 0..s.n_views() {
        update_w(s, prep, m)?;
    }
    update_u(s, prep)?;
    update_t(s, prep)?;
    update_xi(s, prep);
    update_ard(s);
    update_noise(s, prep);
    s.sweeps += 1;
    Ok(())
}

fn logdet_cov(c: &DMatrix<f64>) -> Result<f64> {
    if c.nrows() == 0 {
        return Ok(0.0);
    }
    spd_logdet(c)
}

/// E_q[ln p(v | α)] + H[q(v)] summed over the rows of a row-Gaussian with per-column ARD.
fn ard_rows_term(q: &RowGaussianMatrix, ard: &[GammaPosterior]) -> Result<f64> {
    let prec: Vec<(f64, f64)> = ard.iter().map(|a| (a.mean(), a.ln_mean())).collect();
    rows_term(q, &prec)
}

/// The same term under a fixed standard normal prior.
fn unit_rows_term(q: &RowGaussianMatrix) -> Result<f64> {
    rows_term(q, &vec![(1.0, 0.0); q.dim()])
}

/// `prec` holds (E[α], E[ln α]) per column.
fn rows_term(q: &RowGaussianMatrix, prec: &[(f64, f64)]) -> Result<f64> {
    let rows = q.rows() as f64;
    let h = q.dim() as f64;
    let mom = q.column_second_moments();
    let mut acc = 0.0;
    for (j, (mean, ln_mean)) in prec.iter().enumerate() {
        acc += rows * ln_mean - mean * mom[j];
    }
    acc += rows * h;
    for (g, count) in q.group_counts().into_iter().enumerate() {
        if count > 0 {
            acc += count as f64 * logdet_cov(&q.covs[g])?;
        }
    }
    Ok(0.5 * acc)
}

/// Evidence lower bound of the current state.
pub fn compute_elbo(s: &ModelState, prep: &Prepared) -> Result<f64> {
    let n = prep.n as f64;
    let h = s.active_h as f64;
    let k = s.k as f64;
    let c = s.n_classes as f64;
    let e = expected_errors(s, prep);
    let mut elbo = 0.0;

    // q(g) against N(0, I).
    for (g, count) in s.qg.group_counts().into_iter().enumerate() {
        if count > 0 {
            let cov = &s.qg.covs[g];
            elbo += 0.5 * count as f64 * (h + logdet_cov(cov)? - cov.trace());
        }
    }
    elbo -= 0.5 * s.qg.mean.norm_squared();

    for (m, v) in prep.views.iter().enumerate() {
        let psi = &s.noise[m];
        elbo += 0.5 * v.n_obs as f64 * (psi.ln_mean() - LN_2PI) - 0.5 * psi.mean() * e.view[m];
        elbo += ard_rows_term(&s.qv[m], &s.ard_v[m])?;
    }

    // Discriminative latent and loadings.
    let tau = &s.tau;
    elbo += 0.5 * n * k * (tau.ln_mean() - LN_2PI) - 0.5 * tau.mean() * e.latent;
    if prep.n > 0 {
        elbo += 0.5 * n * (k * (1.0 + LN_2PI) + logdet_cov(&s.qz.covs[0])?);
    }
    for (m, q) in s.qw.iter().enumerate() {
        let d = q.dim() as f64;
        for kk in 0..s.k {
            let a = &s.ard_w[m][kk];
            elbo += 0.5
                * (d * a.ln_mean() - a.mean() * (q.mean.column(kk).norm_squared() + q.trace(kk)) + d + q.logdet(kk));
        }
    }

    // Output view.
    let psi_t = &s.psi_t;
    elbo += 0.5 * n * c * (psi_t.ln_mean() - LN_2PI) - 0.5 * psi_t.mean() * e.output;
    elbo += s.qt.var.iter().map(|v| 0.5 * (1.0 + LN_2PI + v.ln())).sum::<f64>();
    for i in 0..prep.n {
        if !prep.labeled[i] {
            continue;
        }
        for j in 0..s.n_classes {
            let xi = s.xi[(i, j)];
            let mu = s.qt.mean[(i, j)];
            let second = mu * mu + s.qt.var[(i, j)];
            elbo += log_sigmoid(xi) + (prep.onehot[(i, j)] - 0.5) * mu - 0.5 * xi - jj_lambda(xi) * (second - xi * xi);
        }
    }
    elbo += unit_rows_term(&s.qu)?;
    elbo += unit_rows_term(&s.qvt)?;

    let (a0, b0) = (s.hyper.ard_shape, s.hyper.ard_rate);
    for g in s.ard_v.iter().chain(s.ard_w.iter()).flatten() {
        elbo -= g.kl_from_prior(a0, b0);
    }
    let (a0, b0) = (s.hyper.noise_shape, s.hyper.noise_rate);
    for g in s.noise.iter().chain([&s.tau, &s.psi_t]) {
        elbo -= g.kl_from_prior(a0, b0);
    }
    if !elbo.is_finite() {
        return Err(BionicError::numerical("lower bound is not finite"));
    }
    Ok(elbo)
}

/// True once the bound moved by at most `tol·|L_T|` over the last `window` entries.
pub fn has_converged(trace: &[f64], window: usize, tol: f64) -> bool {
    if trace.len() < window + 1 {
        return false;
    }
    let last = trace[trace.len() - 1];
    let past = trace[trace.len() - 1 - window];
    (last - past).abs() <= tol * last.abs()
}

/// Squared norm of each column of the posterior mean view loadings, summed over views.
pub fn factor_energy(s: &ModelState) -> DVector<f64> {
    let mut energy = DVector::zeros(s.active_h);
    for q in &s.qv {
        for (j, col) in q.mean.column_iter().enumerate() {
            energy[j] += col.norm_squared();
        }
    }
    energy
}

/// Removes generative factors whose view-loading energy, relative to the strongest
/// factor, falls below `prune_tol`. Returns the removed indices.
///
/// Only the view loadings count: a factor that loads on the output alone cannot be
/// inferred for a new sample. The energy uses posterior means; the variance of a dead
/// column shrinks only like 1/(sweeps·N) and would keep it above any small threshold.
pub fn prune_factors(s: &mut ModelState) -> Vec<usize> {
    let h = s.active_h;
    let energy = factor_energy(s);
    let max = energy.iter().cloned().fold(0.0, f64::max);
    let mut keep: Vec<usize> = if max > 0.0 && max.is_finite() {
        (0..h).filter(|&j| energy[j] / max >= s.hyper.prune_tol).collect()
    } else {
        Vec::new()
    };
    if keep.is_empty() {
        let best = (0..h).fold(0, |b, j| if energy[j] > energy[b] { j } else { b });
        eprintln!("warning: every generative factor fell below the pruning threshold; keeping factor {best}");
        keep.push(best);
    }
    if keep.len() == h {
        return Vec::new();
    }
    let removed: Vec<usize> = (0..h).filter(|j| !keep.contains(j)).collect();
    s.qg = s.qg.select_columns(&keep);
    s.qvt = s.qvt.select_columns(&keep);
    for m in 0..s.n_views() {
        s.qv[m] = s.qv[m].select_columns(&keep);
        s.ard_v[m] = keep.iter().map(|&j| s.ard_v[m][j]).collect();
    }
    s.active_h = keep.len();
    removed
}

/// Training set for a regime: S keeps labeled rows only; SS and TSS append the
/// extra rows with every label hidden.
pub fn training_set(
    d: &MultiViewDataset,
    regime: SupervisionRegime,
    extra: Option<&MultiViewDataset>,
) -> Result<MultiViewDataset> {
    match regime {
        SupervisionRegime::S => {
            let labeled = d.labeled_indices();
            if labeled.is_empty() {
                return Err(BionicError::validation("supervised fit needs at least one labeled sample"));
            }
            subset(d, &labeled)
        }
        SupervisionRegime::SS | SupervisionRegime::TSS => match extra {
            Some(e) if e.n() > 0 => d.concat(&e.without_labels()),
            _ => Ok(d.clone()),
        },
    }
}

/// Runs sweeps on a prepared state until convergence or `max_sweeps`, pruning on schedule.
pub fn run_sweeps(s: &mut ModelState, prep: &Prepared) -> Result<()> {
    let hp = s.hyper.clone();
    for sweep in 1..=hp.max_sweeps {
        coordinate_sweep(s, prep)?;
        let elbo = compute_elbo(s, prep)?;
        s.elbo_trace.push(elbo);
        if hp.verbose && sweep % 10 == 0 {
            eprintln!("sweep={sweep} elbo={elbo} active_h={}", s.active_h);
        }
        if has_converged(&s.elbo_trace, hp.conv_window, hp.conv_tol) {
            break;
        }
        if sweep % hp.prune_every == 0 && !prune_factors(s).is_empty() {
            s.prune_marks.push(s.elbo_trace.len() - 1);
        }
    }
    Ok(())
}

/// Fits the model under a supervision regime.
pub fn fit(
    d: &MultiViewDataset,
    h: &Hyperparams,
    regime: SupervisionRegime,
    extra_unlabeled: Option<&MultiViewDataset>,
) -> Result<ModelState> {
    h.validate()?;
    validate_dataset(d)?;
    if let Some(e) = extra_unlabeled {
        validate_dataset(e)?;
    }
    let train = training_set(d, regime, extra_unlabeled)?;
    let p = fit_preprocess(&train, h.variance_threshold)?;
    let td = apply_preprocess(&p, &train)?;
    let prep = Prepared::new(&td);
    let mut s = init_model(&td, p, h)?;
    run_sweeps(&mut s, &prep)?;
    Ok(s)
}

/// Log-density constant used in tests and diagnostics.
pub fn gaussian_entropy_1d(var: f64) -> f64 {
    0.5 * (1.0 + (2.0 * PI).ln() + var.ln())
}

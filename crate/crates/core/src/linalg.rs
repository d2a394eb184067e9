//! Small dense linear-algebra helpers shared by the inference and prediction code.

use nalgebra::{DMatrix, DVector};

use crate::error::{BionicError, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Inverse of a symmetric positive-definite matrix together with its log-determinant.
#[derive(Debug, Clone)]
pub struct SpdInverse {
    pub inverse: DMatrix<f64>,
    /// log|A| of the (possibly jittered) input.
    pub logdet: f64,
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Inverts a symmetric positive-definite matrix via Cholesky.
///
/// On factorization failure a diagonal jitter of 1e-10 is added and grown by
/// a factor of ten up to 1e-6 before giving up.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<SpdInverse> {
    with_jitter(a, |l| {
        let m = l.inverse_factor();
        let mut inverse = m.transpose() * &m;
        symmetrize(&mut inverse);
        SpdInverse {
            inverse,
            logdet: l.logdet(),
        }
    })
}

/// log|A| of a symmetric positive-definite matrix, with the same jitter rule as `spd_inverse`.
pub fn spd_logdet(a: &DMatrix<f64>) -> Result<f64> {
    with_jitter(a, Cholesky::logdet)
}

fn with_jitter<T>(a: &DMatrix<f64>, finish: impl Fn(&Cholesky) -> T) -> Result<T> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(BionicError::numerical("non-finite entry in precision matrix"));
    }
    let mut work = a.clone();
    symmetrize(&mut work);
    if let Some(l) = Cholesky::new(&work) {
        return Ok(finish(&l));
    }
    let n = work.nrows();
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-12) {
        let jittered = &work + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(l) = Cholesky::new(&jittered) {
            return Ok(finish(&l));
        }
        jitter *= 10.0;
    }
    Err(BionicError::numerical(format!(
        "covariance solve failed for {n}x{n} matrix after jitter escalation"
    )))
}

/// Lower Cholesky factor stored row-major, so row prefixes are contiguous.
struct Cholesky {
    n: usize,
    rows: Vec<f64>,
}

impl Cholesky {
    /// `None` when a pivot is not strictly positive.
    fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let dot = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                let v = a[(i, j)] - dot;
                if i == j {
                    if !(v > 0.0) || !v.is_finite() {
                        return None;
                    }
                    l[i * n + i] = v.sqrt();
                } else {
                    l[i * n + j] = v / l[j * n + j];
                }
            }
        }
        Some(Cholesky { n, rows: l })
    }

    fn logdet(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.rows[i * self.n + i].ln()).sum()
    }

    /// L⁻¹, lower triangular.
    fn inverse_factor(&self) -> DMatrix<f64> {
        let n = self.n;
        let l = &self.rows;
        // Column-major, so each column's leading part is contiguous.
        let mut m = vec![0.0; n * n];
        for j in 0..n {
            m[j * n + j] = 1.0 / l[j * n + j];
            for i in (j + 1)..n {
                let acc = dot(&l[i * n + j..i * n + i], &m[j * n + j..j * n + i]);
                m[j * n + i] = -acc / l[i * n + i];
            }
        }
        DMatrix::from_vec(n, n, m)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower Cholesky factor, or `None` when a pivot is not strictly positive.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(a).map(|c| DMatrix::from_row_slice(c.n, c.n, &c.rows))
}

/// tr(A·B) for square matrices of equal size without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Frobenius inner product Σ a_ij b_ij.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Submatrix keeping the given rows and columns, in order.
pub fn select(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub fn select_columns(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x), stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Curvature of the Jaakkola–Jordan bound, tanh(ξ/2)/(4ξ), with its ξ→0 limit 1/8.
pub fn jj_lambda(xi: f64) -> f64 {
    let a = xi.abs();
    if a < 1e-6 {
        0.125 - a * a / 96.0
    } else {
        (0.5 * a).tanh() / (4.0 * a)
    }
}

/// Minimum eigenvalue of a symmetric matrix (after symmetrization).
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let mut s = a.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_logdet_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0, 0.5]));
        let out = spd_inverse(&a).unwrap();
        assert!((out.inverse[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((out.inverse[(1, 1)] - 0.25).abs() < 1e-15);
        assert!((out.logdet - 4.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn matches_dense_inverse_and_determinant() {
        let b = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let a = &b * b.transpose() + DMatrix::identity(6, 6) * 0.3;
        let out = spd_inverse(&a).unwrap();
        let dense = a.clone().try_inverse().unwrap();
        assert!((&out.inverse - &dense).amax() < 1e-10 * dense.amax());
        let det = a.determinant().ln();
        assert!((out.logdet - det).abs() < 1e-10);
        assert_eq!(spd_logdet(&a).unwrap(), out.logdet);
        let l = cholesky_lower(&a).unwrap();
        assert!((&l * l.transpose() - &a).amax() < 1e-12 * a.amax());
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let out = spd_inverse(&a).unwrap();
        assert!(out.inverse.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indefinite_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(spd_inverse(&a), Err(BionicError::Numerical(_))));
    }

    #[test]
    fn jj_lambda_limits() {
        assert!((jj_lambda(0.0) - 0.125).abs() < 1e-15);
        let x = 2.0;
        assert!((jj_lambda(x) - (1.0f64).tanh() / 8.0).abs() < 1e-15);
        assert!((jj_lambda(1e-7) - jj_lambda(2e-6)).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_matches_direct() {
        for &x in &[-30.0, -2.0, 0.0, 1.5, 40.0] {
            let direct = sigmoid(x).ln();
            assert!((log_sigmoid(x) - direct).abs() < 1e-12, "x={x}");
        }
    }
}

//! Dense kernels on top of `faer`: column softmax, QR, pseudo-inverse and a
//! sparsity-aware product for one-hot inputs.

use faer::linalg::triangular_solve::solve_upper_triangular_in_place;
use faer::{Mat, Par};

use crate::error::{AmiError, Result};

pub type Matrix = Mat<f64>;

/// Relative cut-off on singular values in the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-12;

/// Relative pivot size below which a QR factor counts as rank deficient.
const QR_RANK_RTOL: f64 = 1e-12;

/// Diagonal-ratio threshold for the QR shortcut in `pseudo_inverse`.
const PINV_QR_RTOL: f64 = 1e-6;

pub fn max_abs(m: &Matrix) -> f64 {
    let mut out = 0.0f64;
    for j in 0..m.ncols() {
        for &v in m.col_as_slice(j) {
            out = out.max(v.abs());
        }
    }
    out
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut out = 0.0f64;
    for j in 0..a.ncols() {
        for (x, y) in a.col_as_slice(j).iter().zip(b.col_as_slice(j)) {
            out = out.max((x - y).abs());
        }
    }
    out
}

/// Builds a `rows x cols` matrix whose columns are consecutive chunks of `data`.
pub fn from_columns(data: &[f64], rows: usize, cols: usize) -> Matrix {
    assert_eq!(data.len(), rows * cols);
    Matrix::from_fn(rows, cols, |i, j| data[j * rows + i])
}

pub fn softmax_cols(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        let col = out.col_as_slice_mut(j);
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
}

/// Householder QR of a square matrix; fails when a pivot of `R` is negligible.
pub fn qr_orthonormal(w: &Matrix) -> Result<QrFactors> {
    if w.nrows() != w.ncols() {
        return Err(AmiError::Shape(format!("QR expects a square matrix, got {}x{}", w.nrows(), w.ncols())));
    }
    let qr = w.qr();
    let r = qr.R().to_owned();
    let diag: Vec<f64> = (0..r.nrows()).map(|i| r[(i, i)].abs()).collect();
    let mx = diag.iter().copied().fold(0.0, f64::max);
    if !mx.is_finite() || diag.iter().any(|&d| !(d > QR_RANK_RTOL * mx)) {
        return Err(AmiError::RankDeficient);
    }
    Ok(QrFactors { q: qr.compute_Q(), r })
}

fn svd_pinv(a: &Matrix) -> Matrix {
    let svd = match a.thin_svd() {
        Ok(s) => s,
        Err(_) => return Matrix::from_fn(a.ncols(), a.nrows(), |_, _| f64::NAN),
    };
    let s = svd.S().column_vector();
    let (u, v) = (svd.U(), svd.V());
    let smax = (0..s.nrows()).map(|i| s[i]).fold(0.0, f64::max);
    let tol = PINV_RTOL * smax;
    let mut vs = v.to_owned();
    for i in 0..s.nrows() {
        let scale = if s[i] > tol { 1.0 / s[i] } else { 0.0 };
        for x in vs.col_as_slice_mut(i) {
            *x *= scale;
        }
    }
    &vs * u.transpose()
}

/// Pseudo-inverse of a tall matrix with comfortably nonzero pivots, via `B = QR`, `B+ = R^-1 Q^T`.
fn tall_pinv_qr(b: &Matrix) -> Option<Matrix> {
    let qr = b.qr();
    let r = qr.thin_R();
    let n = r.ncols();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let mx = diag.iter().copied().fold(0.0, f64::max);
    if !(mx > 0.0) || !mx.is_finite() || diag.iter().any(|&d| !(d > PINV_QR_RTOL * mx)) {
        return None;
    }
    let mut x = qr.compute_thin_Q().transpose().to_owned();
    solve_upper_triangular_in_place(r, x.as_mut(), Par::Seq);
    Some(x)
}

/// Pseudo-inverse of a full-rank matrix, or `None` when it is numerically rank deficient.
pub fn pseudo_inverse_full_rank(a: &Matrix) -> Option<Matrix> {
    if a.nrows() >= a.ncols() {
        tall_pinv_qr(a)
    } else {
        tall_pinv_qr(&a.transpose().to_owned()).map(|p| p.transpose().to_owned())
    }
}

/// Moore-Penrose pseudo-inverse. Full-rank inputs take a QR path; anything
/// close to rank deficient goes through an SVD with cut-off `1e-12 * sigma_max`.
pub fn pseudo_inverse(a: &Matrix) -> Matrix {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Matrix::zeros(a.ncols(), a.nrows());
    }
    pseudo_inverse_full_rank(a).unwrap_or_else(|| svd_pinv(a))
}

fn nnz(m: &Matrix) -> usize {
    (0..m.ncols()).map(|j| m.col_as_slice(j).iter().filter(|v| **v != 0.0).count()).sum()
}

/// `a * b`, skipping structural zeros when either factor is sparse.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions");
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    if m * k * n < 1 << 15 {
        return a * b;
    }
    if 8 * nnz(b) < k * n {
        let mut out = Matrix::zeros(m, n);
        for j in 0..n {
            let bj = b.col_as_slice(j);
            let oj = out.col_as_slice_mut(j);
            for (l, &w) in bj.iter().enumerate() {
                if w != 0.0 {
                    for (o, &x) in oj.iter_mut().zip(a.col_as_slice(l)) {
                        *o += w * x;
                    }
                }
            }
        }
        return out;
    }
    if 8 * nnz(a) < m * k {
        let mut out = Matrix::zeros(m, n);
        for l in 0..k {
            for (i, &w) in a.col_as_slice(l).iter().enumerate() {
                if w != 0.0 {
                    for j in 0..n {
                        out[(i, j)] += w * b[(l, j)];
                    }
                }
            }
        }
        return out;
    }
    a * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_fn(2, 1, |_, _| 0.0);
        let s = softmax_cols(&m);
        assert_eq!((s[(0, 0)], s[(1, 0)]), (0.5, 0.5));
        let m = Matrix::from_fn(2, 1, |i, _| if i == 0 { 1000.0 } else { 0.0 });
        let s = softmax_cols(&m);
        assert_eq!(s[(0, 0)], 1.0);
        assert!(s[(1, 0)] >= 0.0 && s[(1, 0)] < 1e-300);
        let m = Matrix::from_fn(3, 1, |i, _| ((i + 1) as f64).ln());
        let s = softmax_cols(&m);
        for i in 0..3 {
            assert!((s[(i, 0)] - (i + 1) as f64 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn qr_of_identity() {
        let f = qr_orthonormal(&Matrix::identity(4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((f.q[(i, j)].abs() - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn qr_random() {
        let w = randn(64, 64, 1);
        let f = qr_orthonormal(&w).unwrap();
        let qtq = f.q.transpose() * &f.q;
        assert!(max_abs_diff(&qtq, &Matrix::identity(64, 64)) <= 1e-10);
        assert!(max_abs_diff(&(&f.q * &f.r), &w) <= 1e-10);
        for j in 0..64 {
            for i in (j + 1)..64 {
                assert_eq!(f.r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_rank_deficient() {
        let mut w = randn(5, 5, 2);
        for i in 0..5 {
            w[(i, 4)] = w[(i, 0)];
        }
        assert!(matches!(qr_orthonormal(&w), Err(AmiError::RankDeficient)));
    }

    #[test]
    fn pinv_diag() {
        let a = Matrix::from_fn(2, 2, |i, j| if i == 0 && j == 0 { 2.0 } else { 0.0 });
        let p = pseudo_inverse(&a);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(p[(0, 1)], 0.0);
        assert_eq!(p[(1, 0)], 0.0);
        assert!(p[(1, 1)].abs() < 1e-15);
    }

    #[test]
    fn pinv_orthonormal_rows() {
        let q = qr_orthonormal(&randn(6, 6, 3)).unwrap().q;
        let a = q.transpose().subrows(1, 5).to_owned();
        let p = pseudo_inverse(&a);
        assert!(max_abs_diff(&p, &a.transpose().to_owned()) <= 1e-12);
    }

    #[test]
    fn matmul_paths_agree() {
        let a = randn(40, 50, 4);
        let mut b = Matrix::zeros(50, 30);
        for j in 0..30 {
            b[((j * 7) % 50, j)] = 1.0 + j as f64;
        }
        let dense = &a * &b;
        assert!(max_abs_diff(&matmul(&a, &b), &dense) < 1e-12);
        let at = b.transpose().to_owned();
        let c = randn(50, 40, 5);
        assert!(max_abs_diff(&matmul(&at, &c), &(&at * &c)) < 1e-12);
        let d = randn(50, 30, 6);
        assert!(max_abs_diff(&matmul(&a, &d), &(&a * &d)) < 1e-12);
    }

    #[test]
    fn pinv_of_zero() {
        let p = pseudo_inverse(&Matrix::zeros(3, 2));
        assert_eq!((p.nrows(), p.ncols()), (2, 3));
        assert_eq!(max_abs(&p), 0.0);
    }
}

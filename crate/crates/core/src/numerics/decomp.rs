use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};

const SYMMETRY_TOL: f64 = 1e-9;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Lower-triangular `L` with `L·Lᵀ = s`.
///
/// Fails with [`Error::NotPositiveDefinite`] carrying the index of the first
/// pivot that is not strictly positive.
pub fn cholesky(s: &Matrix) -> Result<Matrix> {
    if !s.is_square() {
        return Err(Error::invalid(format!(
            "cholesky needs a square matrix, got {:?}",
            s.shape()
        )));
    }
    let scale = s.max_abs().max(1.0);
    if s.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::invalid("cholesky input is not symmetric"));
    }
    let n = s.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Eigenvalues, non-increasing.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, aligned with `values`.
    pub vectors: Matrix,
}

impl SymmetricEigen {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = scale_columns(&self.vectors, &self.values);
        scaled.matmul_transposed(&self.vectors)
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn symmetric_eigen(s: &Matrix) -> Result<SymmetricEigen> {
    if !s.is_square() {
        return Err(Error::invalid("eigendecomposition needs a square matrix"));
    }
    let scale = s.max_abs().max(1.0);
    if s.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::invalid("eigendecomposition input is not symmetric"));
    }
    let n = s.rows();
    let mut a = s.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let total = a.frobenius_norm();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_col(dst, &v.col(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Rank-k truncated singular value decomposition `m ≈ U·diag(S)·Vᵀ`.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, length `k`.
    pub s: Vec<f64>,
    /// `cols × k`, orthonormal columns.
    pub v: Matrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        scale_columns(&self.u, &self.s).matmul_transposed(&self.v)
    }
}

/// Best rank-`k` approximation via one-sided Jacobi on the full matrix.
pub fn truncated_svd(m: &Matrix, k: usize) -> Result<TruncatedSvd> {
    let min_dim = m.rows().min(m.cols());
    if k == 0 {
        return Err(Error::invalid("truncated SVD rank must be at least 1"));
    }
    if k > min_dim {
        return Err(Error::invalid(format!(
            "truncated SVD rank {k} exceeds min dimension {min_dim}"
        )));
    }
    let full = if m.rows() >= m.cols() {
        one_sided_jacobi(m)
    } else {
        let t = one_sided_jacobi(&m.transpose());
        TruncatedSvd { u: t.v, s: t.s, v: t.u }
    };
    Ok(TruncatedSvd {
        u: leading_columns(&full.u, k),
        s: full.s[..k].to_vec(),
        v: leading_columns(&full.v, k),
    })
}

/// Thin SVD of a tall (`rows ≥ cols`) matrix.
fn one_sided_jacobi(m: &Matrix) -> TruncatedSvd {
    let (rows, n) = m.shape();
    debug_assert!(rows >= n);
    // Work on columns stored as rows of the transpose for contiguous access.
    let mut w = m.transpose();
    let mut v = Matrix::identity(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(w.row(p), w.row(p));
                let beta = dot(w.row(q), w.row(q));
                let gamma = dot(w.row(p), w.row(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let wp = w[(p, k)];
                    let wq = w[(q, k)];
                    w[(p, k)] = c * wp - s * wq;
                    w[(q, k)] = s * wp + c * wq;
                }
                for k in 0..n {
                    let vp = v[(k, p)];
                    let vq = v[(k, q)];
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| dot(w.row(j), w.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let largest = norms.iter().cloned().fold(0.0, f64::max);
    let cutoff = largest * 1e-14 * rows as f64;
    let mut u = Matrix::zeros(rows, n);
    let mut vv = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        vv.set_col(dst, &v.col(src));
        if sigma > cutoff && sigma > 0.0 {
            let col: Vec<f64> = w.row(src).iter().map(|x| x / sigma).collect();
            u.set_col(dst, &col);
            s.push(sigma);
        } else {
            s.push(0.0);
            deficient.push(dst);
        }
    }
    complete_orthonormal(&mut u, &deficient);
    TruncatedSvd { u, s, v: vv }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column (Gram–Schmidt over the standard basis).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let rows = u.rows();
    let mut candidate = 0;
    for &col in missing {
        while candidate < rows {
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for j in 0..u.cols() {
                    if j == col || missing.contains(&j) && u.col(j).iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let basis = u.col(j);
                    let proj = dot(&basis, &e);
                    for (x, b) in e.iter_mut().zip(&basis) {
                        *x -= proj * b;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                let unit: Vec<f64> = e.iter().map(|x| x / norm).collect();
                u.set_col(col, &unit);
                break;
            }
        }
    }
}

fn leading_columns(m: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), k);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[..k]);
    }
    out
}

pub(crate) fn scale_columns(m: &Matrix, s: &[f64]) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (x, &f) in out.row_mut(r).iter_mut().zip(s) {
            *x *= f;
        }
    }
    out
}

/// Column-append then re-truncate: given a factor `L` (n×j) with
/// `L·Lᵀ ≈ M`, returns `L'` (n×≤budget) with `L'·L'ᵀ` the best rank-`budget`
/// approximation of `L·Lᵀ + C·Cᵀ`.
pub fn low_rank_update(current: &Matrix, new_columns: &Matrix, budget: usize) -> Result<Matrix> {
    if budget == 0 {
        return Err(Error::invalid("low-rank budget must be at least 1"));
    }
    let n = new_columns.rows();
    if current.cols() > 0 && current.rows() != n {
        return Err(Error::invalid("low-rank update row mismatch"));
    }
    let width = current.cols() + new_columns.cols();
    let mut stacked = Matrix::zeros(n, width);
    for r in 0..n {
        let row = stacked.row_mut(r);
        if current.cols() > 0 {
            row[..current.cols()].copy_from_slice(current.row(r));
        }
        row[current.cols()..].copy_from_slice(new_columns.row(r));
    }
    let k = budget.min(n).min(width);
    let svd = truncated_svd(&stacked, k)?;
    Ok(scale_columns(&svd.u, &svd.s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::from_vec(rows, cols, RandomStream::new(seed).gaussian(rows * cols)).unwrap()
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        m.transpose_matmul(m)
            .sub(&Matrix::identity(m.cols()))
            .unwrap()
            .max_abs()
    }

    #[test]
    fn cholesky_identity() {
        assert_eq!(cholesky(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let s = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&s).unwrap();
        let expected = [2.0, 0.0, 1.0, 2f64.sqrt()];
        for (a, b) in l.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let rebuilt = l.matmul_transposed(&l);
        assert!(rebuilt.sub(&s).unwrap().frobenius_norm() / s.frobenius_norm() < 1e-9);
    }

    #[test]
    fn cholesky_indefinite_reports_pivot() {
        let s = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&s), Err(Error::NotPositiveDefinite { pivot: 1 })));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let s = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn svd_rank_one_exact() {
        let u = Matrix::column(&[1.0, -2.0, 0.5, 3.0]);
        let v = Matrix::column(&[0.3, 1.0, -1.5]);
        let m = u.matmul_transposed(&v);
        let svd = truncated_svd(&m, 1).unwrap();
        assert!(svd.reconstruct().sub(&m).unwrap().max_abs() < 1e-9);
        assert!(orthonormality_error(&svd.u) < 1e-8);
        assert!(orthonormality_error(&svd.v) < 1e-8);
    }

    #[test]
    fn svd_identity() {
        let svd = truncated_svd(&Matrix::identity(3), 3).unwrap();
        assert!(svd.s.iter().all(|&s| (s - 1.0).abs() < 1e-15));
        assert_eq!(svd.reconstruct().sub(&Matrix::identity(3)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn svd_zero_rank_rejected() {
        assert!(truncated_svd(&Matrix::identity(2), 0).is_err());
        assert!(truncated_svd(&Matrix::identity(2), 3).is_err());
    }

    #[test]
    fn svd_rank_deficient_still_orthonormal() {
        let u = Matrix::column(&[1.0, 2.0, 3.0, 4.0]);
        let m = u.matmul_transposed(&Matrix::column(&[1.0, 1.0, 1.0]));
        let svd = truncated_svd(&m, 3).unwrap();
        assert!(orthonormality_error(&svd.u) < 1e-8);
        assert!(orthonormality_error(&svd.v) < 1e-8);
        assert!(svd.s[1].abs() < 1e-12);
    }

    #[test]
    fn svd_wide_matrix() {
        let m = random(3, 7, 5);
        let svd = truncated_svd(&m, 3).unwrap();
        assert_eq!(svd.u.shape(), (3, 3));
        assert_eq!(svd.v.shape(), (7, 3));
        assert!(svd.reconstruct().sub(&m).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn eigen_reconstructs_and_sorts() {
        let b = random(5, 5, 9);
        let s = b.matmul_transposed(&b);
        let eig = symmetric_eigen(&s).unwrap();
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        assert!(eig.reconstruct().sub(&s).unwrap().max_abs() < 1e-10);
        assert!(orthonormality_error(&eig.vectors) < 1e-12);
    }

    #[test]
    fn low_rank_update_matches_dense_when_budget_suffices() {
        let a = random(6, 2, 1);
        let b = random(6, 2, 2);
        let l = low_rank_update(&Matrix::zeros(6, 0), &a, 4).unwrap();
        let l = low_rank_update(&l, &b, 4).unwrap();
        let dense = a.matmul_transposed(&a).add(&b.matmul_transposed(&b)).unwrap();
        assert!(l.matmul_transposed(&l).sub(&dense).unwrap().max_abs() < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn cholesky_recovers_lower_factor(seed in 0u64..200) {
            let mut rng = RandomStream::new(seed);
            let n = 4;
            let mut l = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..i {
                    l[(i, j)] = rng.standard_normal();
                }
                l[(i, i)] = rng.uniform(0.5, 2.0);
            }
            let s = l.matmul_transposed(&l);
            let got = cholesky(&s).unwrap();
            proptest::prop_assert!(got.sub(&l).unwrap().max_abs() < 1e-9);
        }

        #[test]
        fn svd_error_non_increasing_in_rank(seed in 0u64..100) {
            let m = random(6, 5, seed);
            let mut prev = f64::INFINITY;
            for k in 1..=5 {
                let svd = truncated_svd(&m, k).unwrap();
                let err = svd.reconstruct().sub(&m).unwrap().frobenius_norm();
                proptest::prop_assert!(err <= prev + 1e-12);
                prev = err;
            }
            proptest::prop_assert!(prev < 1e-9);
        }
    }
}

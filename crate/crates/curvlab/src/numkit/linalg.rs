//! Symmetric eigendecomposition, determinant, inverse, and numeric rank.
//!
//! The eigensolver is cyclic Jacobi, which is deterministic and needs no
//! external dependency; it is intended for small dense problems only
//! (dimension at most [`SYM_EIGEN_CAP`]). Rank goes through a one-sided
//! Jacobi SVD.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Largest dimension accepted by [`sym_eigen`].
pub const SYM_EIGEN_CAP: usize = 512;

/// Default relative tolerance for [`numeric_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// `tol` bounds the accepted asymmetry relative to `1 + max |a_ij|`.
/// Returns eigenvalues in ascending order and the matrix whose column
/// `i` is the unit eigenvector for eigenvalue `i`.
pub fn sym_eigen(m: &Matrix, tol: f64) -> Result<(Vec<f64>, Matrix)> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "sym_eigen needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    if n > SYM_EIGEN_CAP {
        return Err(Error::DimensionCap {
            dim: n,
            cap: SYM_EIGEN_CAP,
            hint: "cyclic Jacobi is for small dense matrices",
        });
    }
    let allowed = tol * (1.0 + m.max_abs());
    let asymmetry = m.max_asymmetry();
    if asymmetry > allowed {
        return Err(Error::NotSymmetric { asymmetry, allowed });
    }

    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    if n <= 1 {
        let evals = (0..n).map(|i| a.get(i, i)).collect();
        return Ok((evals, v));
    }

    let frob = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let stop = 1e-15 * frob;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if (2.0 * off).sqrt() <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of A.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).unwrap());
    let evals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs.set(k, new_col, v.get(k, old_col));
        }
    }
    Ok((evals, vecs))
}

/// Determinant of a square matrix via LU with partial pivoting.
pub fn det(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "det needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut sign = 1.0;
    let mut result = 1.0;
    for k in 0..n {
        let mut pivot = k;
        for i in (k + 1)..n {
            if a.get(i, k).abs() > a.get(pivot, k).abs() {
                pivot = i;
            }
        }
        if a.get(pivot, k) == 0.0 {
            return Ok(0.0);
        }
        if pivot != k {
            for j in 0..n {
                let tmp = a.get(k, j);
                a.set(k, j, a.get(pivot, j));
                a.set(pivot, j, tmp);
            }
            sign = -sign;
        }
        let akk = a.get(k, k);
        result *= akk;
        for i in (k + 1)..n {
            let factor = a.get(i, k) / akk;
            if factor == 0.0 {
                continue;
            }
            for j in k..n {
                a.set(i, j, a.get(i, j) - factor * a.get(k, j));
            }
        }
    }
    Ok(sign * result)
}

/// Matrix inverse via Gauss-Jordan with partial pivoting.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Shape("inverse needs a square matrix".into()));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for k in 0..n {
        let mut pivot = k;
        for i in (k + 1)..n {
            if a.get(i, k).abs() > a.get(pivot, k).abs() {
                pivot = i;
            }
        }
        let pv = a.get(pivot, k);
        if pv == 0.0 {
            return Err(Error::Numerical("singular matrix has no inverse".into()));
        }
        if pivot != k {
            for j in 0..n {
                let (x, y) = (a.get(k, j), a.get(pivot, j));
                a.set(k, j, y);
                a.set(pivot, j, x);
                let (x, y) = (inv.get(k, j), inv.get(pivot, j));
                inv.set(k, j, y);
                inv.set(pivot, j, x);
            }
        }
        let akk = a.get(k, k);
        for j in 0..n {
            a.set(k, j, a.get(k, j) / akk);
            inv.set(k, j, inv.get(k, j) / akk);
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            let factor = a.get(i, k);
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a.set(i, j, a.get(i, j) - factor * a.get(k, j));
                inv.set(i, j, inv.get(i, j) - factor * inv.get(k, j));
            }
        }
    }
    Ok(inv)
}

/// Singular values by one-sided Jacobi, descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    // Work on the tall orientation so columns are the short side.
    let work = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let rows = work.rows();
    let cols = work.cols();
    let mut cols_data: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j)).collect())
        .collect();

    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let alpha: f64 = cols_data[i].iter().map(|x| x * x).sum();
                let beta: f64 = cols_data[j].iter().map(|x| x * x).sum();
                let gamma: f64 = cols_data[i]
                    .iter()
                    .zip(&cols_data[j])
                    .map(|(x, y)| x * y)
                    .sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let x = cols_data[i][k];
                    let y = cols_data[j][k];
                    cols_data[i][k] = c * x - s * y;
                    cols_data[j][k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols_data
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sv)
}

/// Number of singular values above `tol` times the largest one.
pub fn numeric_rank(m: &Matrix, tol: f64) -> Result<usize> {
    let sv = singular_values(m)?;
    let largest = sv.first().copied().unwrap_or(0.0);
    if largest == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * largest).count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn eigen_identity() {
        let (evals, _) = sym_eigen(&Matrix::identity(3), 1e-12).unwrap();
        assert_eq!(evals, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eigen_diagonal() {
        let (evals, _) = sym_eigen(&Matrix::diag(&[3.0, 1.0, 2.0]), 1e-12).unwrap();
        assert_eq!(evals, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn eigen_2x2_hand() {
        // [[2,1],[1,2]] has characteristic polynomial (2-l)^2 - 1, roots 1 and 3.
        let m = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let (evals, vecs) = sym_eigen(&m, 1e-12).unwrap();
        assert!((evals[0] - 1.0).abs() < 1e-12);
        assert!((evals[1] - 3.0).abs() < 1e-12);
        // Columns are eigenvectors: M v = lambda v.
        for (idx, &lambda) in evals.iter().enumerate() {
            let v: Vec<f64> = (0..2).map(|k| vecs.get(k, idx)).collect();
            let mv = m.matvec(&v).unwrap();
            for k in 0..2 {
                assert!((mv[k] - lambda * v[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let m = mat(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            sym_eigen(&m, 1e-9),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn det_examples() {
        assert_eq!(det(&Matrix::identity(4)).unwrap(), 1.0);
        assert_eq!(det(&Matrix::diag(&[4.0, 9.0])).unwrap(), 36.0);
        let m = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!((det(&m).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn det_rejects_non_square() {
        let m = Matrix::zeros(2, 3);
        assert!(det(&m).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numeric_rank(&Matrix::zeros(3, 3), DEFAULT_RANK_TOL).unwrap(), 0);
        assert_eq!(
            numeric_rank(&Matrix::identity(4), DEFAULT_RANK_TOL).unwrap(),
            4
        );
        // Second row is twice the first.
        let m = mat(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(numeric_rank(&m, DEFAULT_RANK_TOL).unwrap(), 1);
    }

    #[test]
    fn inverse_roundtrip() {
        let m = mat(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let inv = inverse(&m).unwrap();
        let prod = m.matmul(&inv).unwrap();
        let eye = Matrix::identity(2);
        assert!(prod.sub(&eye).unwrap().max_abs() < 1e-12);
    }
}

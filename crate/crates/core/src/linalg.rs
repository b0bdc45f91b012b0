//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_symmetric_eigenvalue(a: &Mat) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_symmetric(a: &Mat, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).amax() <= tol * (1.0 + a.amax())
}

/// Numerical rank from a column-pivoted QR factorization.
///
/// Diagonal entries of R with magnitude at most `tol` count as zero.
pub fn rank(a: &Mat, tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    (0..r.nrows().min(r.ncols()))
        .filter(|&i| r[(i, i)].abs() > tol)
        .count()
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Rows of `a` selected by `idx`, in order.
pub fn select_rows(a: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), a.ncols(), |i, j| a[(idx[i], j)])
}

pub fn select_entries(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Submatrix `a[rows, cols]`.
pub fn submatrix(a: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Orthonormal basis of the controllable subspace of (A, B), built by
/// block Arnoldi with re-orthogonalized Gram-Schmidt.
///
/// Vectors whose residual norm after projection falls below `tol` times the
/// largest candidate norm seen are discarded.
pub fn controllable_basis(a: &Mat, b: &Mat, tol: f64) -> Mat {
    let n = a.nrows();
    let mut basis: Vec<Vector> = Vec::with_capacity(n);
    let mut pending: Vec<Vector> = b.column_iter().map(|c| c.into_owned()).collect();
    let scale = a.norm().max(b.norm()).max(1.0);
    while let Some(mut v) = (!pending.is_empty()).then(|| pending.remove(0)) {
        if basis.len() == n {
            break;
        }
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > tol * scale {
            let q = v / norm;
            pending.push(a * &q);
            basis.push(q);
        }
    }
    let mut out = Mat::zeros(n, basis.len());
    for (j, q) in basis.iter().enumerate() {
        out.set_column(j, q);
    }
    out
}

use super::{DiscreteSystem, ModelError, Result};
use crate::linalg::{self, Mat};

/// Stabilizing Riccati solution and the matching LQR gain `u = K x`.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: Mat,
    pub k: Mat,
}

const MAX_DOUBLINGS: usize = 100;

/// Solves `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q` with the structure
/// preserving doubling algorithm.
///
/// Iterates converge quadratically; stopping happens once the Frobenius
/// change of `P` drops below `1e-12 * max(1, |P|)`.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<DareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(ModelError::Validation("DARE operands have inconsistent dimensions".into()));
    }
    let sys = DiscreteSystem::new(a.clone(), b.clone(), 1.0)?;
    if !sys.is_stabilizable() {
        return Err(ModelError::NoSolution("(A, B) is not stabilizable".into()));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| ModelError::Validation("R is not positive definite".into()))?;

    let eye = Mat::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * r_chol.solve(&b.transpose());
    let mut hk = q.clone();
    let mut converged = false;
    for _ in 0..MAX_DOUBLINGS {
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let (Some(w_ak), Some(w_gk)) = (lu.solve(&ak), lu.solve(&gk)) else {
            return Err(ModelError::NoSolution("singular doubling step".into()));
        };
        let a_next = &ak * &w_ak;
        let g_next = &gk + &ak * &w_gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w_ak;
        let h_next = (&h_next + h_next.transpose()) * 0.5;
        if !linalg::all_finite(&h_next) {
            return Err(ModelError::NoSolution("doubling iterates diverged".into()));
        }
        let delta = (&h_next - &hk).norm();
        ak = a_next;
        gk = (&g_next + g_next.transpose()) * 0.5;
        hk = h_next;
        if delta <= 1e-12 * hk.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ModelError::NoSolution(format!("no convergence in {MAX_DOUBLINGS} doublings")));
    }

    let p = hk;
    let k = lqr_gain(a, b, r, &p)?;
    let resid = riccati_residual(a, b, q, r, &p);
    if resid > 1e-8 * p.norm().max(1.0) {
        return Err(ModelError::NoSolution(format!("Riccati residual {resid:.3e} too large")));
    }
    if linalg::spectral_radius(&(a + b * &k)) >= 1.0 {
        return Err(ModelError::NoSolution("closed loop is not stable".into()));
    }
    Ok(DareSolution { p, k })
}

/// `K = -(R + B'PB)^-1 B'PA`.
pub(crate) fn lqr_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let bp = b.transpose() * p;
    let s = r + &bp * b;
    let chol = s
        .cholesky()
        .ok_or_else(|| ModelError::NoSolution("R + B'PB is not positive definite".into()))?;
    Ok(-chol.solve(&(&bp * a)))
}

/// One Riccati map application `Ric(P)`.
pub(crate) fn riccati_map(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Mat {
    let at_p = a.transpose() * p;
    let s = r + b.transpose() * p * b;
    let x = s.lu().solve(&(b.transpose() * p * a)).expect("R + B'PB singular");
    &at_p * a - &at_p * b * x + q
}

/// Frobenius norm of `Ric(P) - P`.
pub fn riccati_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> f64 {
    (riccati_map(a, b, q, r, p) - p).norm()
}

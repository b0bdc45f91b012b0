use super::{BoxConstraints, DiscreteSystem, ModelError, Polytope, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lp::{self, LpOutcome};

/// Iteration cap of the maximal admissible set recursion.
pub const TERMINAL_MAX_ITER: usize = 500;

const REDUNDANCY_TOL: f64 = 1e-9;

/// Maximal constraint-admissible set of `x+ = (A + B K) x` under the state
/// box and `K x` in the input box (Gilbert and Tan).
///
/// `O_{t+1} = O_t ∩ {x : (A+BK)^{t+1} x ∈ O_0}`, stopping as soon as every
/// row of the next block is redundant for `O_t`. The result is stripped of
/// redundant rows.
pub fn compute_terminal_set(sys: &DiscreteSystem, k: &Mat, bx: &BoxConstraints) -> Result<Polytope> {
    let n = sys.n();
    let m = sys.m();
    if k.shape() != (m, n) || bx.n() != n || bx.m() != m {
        return Err(ModelError::Validation("terminal set operands have inconsistent dimensions".into()));
    }
    let ak = &sys.a + &sys.b * k;
    if linalg::spectral_radius(&ak) >= 1.0 {
        return Err(ModelError::Validation("closed loop A + BK is not stable".into()));
    }

    // O_0 = {x : x in X, K x in U}
    let mut h0 = Mat::zeros(2 * n + 2 * m, n);
    let mut c0 = Vector::zeros(2 * n + 2 * m);
    for i in 0..n {
        h0[(i, i)] = 1.0;
        h0[(n + i, i)] = -1.0;
        c0[i] = bx.x_hi[i];
        c0[n + i] = -bx.x_lo[i];
    }
    for j in 0..m {
        h0.row_mut(2 * n + j).copy_from(&k.row(j));
        h0.row_mut(2 * n + m + j).copy_from(&(-k.row(j)));
        c0[2 * n + j] = bx.u_hi[j];
        c0[2 * n + m + j] = -bx.u_lo[j];
    }

    let mut c_mat = h0.clone();
    let mut c_vec = c0.clone();
    let mut power = Mat::identity(n, n);
    for _ in 0..TERMINAL_MAX_ITER {
        power = &ak * &power;
        let block = &h0 * &power;
        let mut all_redundant = true;
        for j in 0..block.nrows() {
            let row = block.row(j).transpose();
            let bound = lp_bound(&c_mat, &c_vec, &row)?;
            if bound > c0[j] + REDUNDANCY_TOL {
                all_redundant = false;
                break;
            }
        }
        if all_redundant {
            return remove_redundant_rows(&Polytope { c_mat, c_vec });
        }
        c_mat = stack(&c_mat, &block);
        c_vec = Vector::from_iterator(c_vec.len() + c0.len(), c_vec.iter().chain(c0.iter()).copied());
    }
    Err(ModelError::Termination(TERMINAL_MAX_ITER))
}

fn stack(top: &Mat, bottom: &Mat) -> Mat {
    let mut out = Mat::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Supremum of `row'x` over `{x : C x <= c}`; `+inf` when unbounded.
fn lp_bound(c_mat: &Mat, c_vec: &Vector, row: &Vector) -> Result<f64> {
    Ok(match lp::maximize(c_mat, c_vec, row)? {
        LpOutcome::Optimal { value, .. } => value,
        LpOutcome::Unbounded => f64::INFINITY,
        LpOutcome::Infeasible => f64::NEG_INFINITY,
    })
}

/// Removes rows implied by the others, one at a time in index order.
///
/// Row `i` is redundant if maximizing `C_i x` over the remaining rows, with
/// row `i` itself relaxed by one, stays within `c_i + 1e-9`. Among duplicate
/// rows the later copy survives.
pub fn remove_redundant_rows(p: &Polytope) -> Result<Polytope> {
    let mut keep: Vec<usize> = (0..p.rows()).collect();
    let mut i = 0;
    while i < keep.len() {
        let idx = keep[i];
        let row = p.c_mat.row(idx).transpose();
        let redundant = if row.amax() == 0.0 {
            p.c_vec[idx] >= 0.0
        } else {
            let mut rows = keep.clone();
            rows.remove(i);
            rows.push(idx);
            let a = linalg::select_rows(&p.c_mat, &rows);
            let mut b = linalg::select_entries(&p.c_vec, &rows);
            let last = b.len() - 1;
            b[last] += 1.0;
            lp_bound(&a, &b, &row)? <= p.c_vec[idx] + REDUNDANCY_TOL
        };
        if redundant {
            keep.remove(i);
        } else {
            i += 1;
        }
    }
    Polytope::new(linalg::select_rows(&p.c_mat, &keep), linalg::select_entries(&p.c_vec, &keep))
}

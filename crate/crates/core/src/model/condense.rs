use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use super::{ModelError, MpcSpec, Result};
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    Input,
    State,
    Terminal,
}

/// Origin of one inequality row of the condensed QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowInfo {
    /// Prediction stage, `N` for terminal rows.
    pub stage: usize,
    pub kind: RowKind,
    /// Input or state component; for terminal rows, the row of the terminal polytope.
    pub component: usize,
    /// Upper bound row (`true`) or lower bound row.
    pub upper: bool,
}

/// Condensed MPC problem
/// `min ½U'HU + x'FU + ½x'Yx  s.t.  GU <= w + Ex`
/// together with the factorizations every solve and law construction needs.
#[derive(Debug, Clone)]
pub struct QpData {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// Plant matrices, for rolling out predictions.
    pub a: Mat,
    pub b: Mat,
    pub h: Mat,
    pub f: Mat,
    pub y: Mat,
    pub g: Mat,
    /// `G'`, kept so constraint normals are contiguous columns.
    pub gt: Mat,
    pub w: Vector,
    pub e: Mat,
    /// `E + G H^-1 F'`.
    pub s: Mat,
    pub rows: Vec<RowInfo>,
    /// Rows whose `G` row is identically zero: the state bounds on `x̃(0) = x`.
    /// They restrict the parameter only and never enter an active set.
    pub param_only: Vec<bool>,
    pub h_chol: Cholesky<f64, nalgebra::Dyn>,
    /// `L^-T` for `H = L L'`, so that `J J' = H^-1`.
    pub j0: Mat,
    /// `H^-1 F'`.
    pub hinv_ft: Mat,
    /// `H^-1 G'`.
    pub hinv_gt: Mat,
    /// `G H^-1 G'`.
    pub ghg: Mat,
}

impl QpData {
    pub fn q(&self) -> usize {
        self.w.len()
    }

    /// Number of decision variables `mN`.
    pub fn nv(&self) -> usize {
        self.h.nrows()
    }

    /// Right-hand side `w + E x`.
    pub fn rhs(&self, x: &Vector) -> Vector {
        &self.w + &self.e * x
    }

    /// Value of the QP objective at `(U, x)`.
    pub fn objective(&self, u: &Vector, x: &Vector) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + x.dot(&(&self.f * u)) + 0.5 * x.dot(&(&self.y * x))
    }

    /// Index of the row with the given origin, if there is one.
    pub fn row_index(&self, info: RowInfo) -> Option<usize> {
        let (n, m, nn) = (self.n, self.m, self.horizon);
        let per_stage = 2 * m + 2 * n;
        let idx = match info.kind {
            RowKind::Input if info.stage < nn && info.component < m => {
                info.stage * per_stage + if info.upper { 0 } else { m } + info.component
            }
            RowKind::State if info.stage < nn && info.component < n => {
                info.stage * per_stage + 2 * m + if info.upper { 0 } else { n } + info.component
            }
            RowKind::Terminal if info.stage == nn => nn * per_stage + info.component,
            _ => return None,
        };
        (idx < self.q() && self.rows[idx] == info).then_some(idx)
    }
}

/// Prediction matrices `x̃(i) = Φ_i x + Γ_i U` for `i = 0..=N`, stacked.
fn predictions(a: &Mat, b: &Mat, horizon: usize) -> (Mat, Mat) {
    let n = a.nrows();
    let m = b.ncols();
    let mut phi = Mat::zeros((horizon + 1) * n, n);
    let mut gamma = Mat::zeros((horizon + 1) * n, m * horizon);
    let mut pow = Mat::identity(n, n);
    // A^k B, k = 0..N-1
    let mut apb = Vec::with_capacity(horizon);
    let mut cur = b.clone();
    for _ in 0..horizon {
        apb.push(cur.clone());
        cur = a * cur;
    }
    for i in 0..=horizon {
        phi.view_mut((i * n, 0), (n, n)).copy_from(&pow);
        pow = a * pow;
        for j in 0..i {
            gamma.view_mut((i * n, j * m), (n, m)).copy_from(&apb[i - 1 - j]);
        }
    }
    (phi, gamma)
}

/// Builds the condensed QP.
///
/// Rows are stage-major: for each stage `i < N` the `m` upper and `m` lower
/// input bounds, then the `n` upper and `n` lower state bounds on `x̃(i)`;
/// the terminal polytope rows on `x̃(N)` come last. The stage-0 state rows
/// are kept (flagged in `param_only`), so `q = 2mN + 2nN + |T|`.
pub fn condense(spec: &MpcSpec) -> Result<QpData> {
    spec.validate()?;
    let n = spec.n();
    let m = spec.m();
    let nn = spec.horizon;
    let nv = m * nn;
    let (phi, gamma) = predictions(&spec.system.a, &spec.system.b, nn);

    // Cost: Σ x̃'Qx̃ + u'Ru over stages, plus x̃(N)'P x̃(N).
    let mut qbar_gamma = Mat::zeros(gamma.nrows(), nv);
    let mut qbar_phi = Mat::zeros(phi.nrows(), n);
    for i in 0..=nn {
        let wgt = if i < nn { &spec.q } else { &spec.p };
        qbar_gamma
            .view_mut((i * n, 0), (n, nv))
            .copy_from(&(wgt * gamma.view((i * n, 0), (n, nv))));
        qbar_phi
            .view_mut((i * n, 0), (n, n))
            .copy_from(&(wgt * phi.view((i * n, 0), (n, n))));
    }
    let mut h = gamma.transpose() * &qbar_gamma;
    for i in 0..nn {
        let mut blk = h.view_mut((i * m, i * m), (m, m));
        blk += &spec.r;
    }
    h *= 2.0;
    let h = (&h + h.transpose()) * 0.5;
    let f = phi.transpose() * &qbar_gamma * 2.0;
    let y = phi.transpose() * &qbar_phi * 2.0;
    let y = (&y + y.transpose()) * 0.5;

    let term = &spec.terminal;
    let q = 2 * nv + 2 * n * nn + term.rows();
    let mut g = Mat::zeros(q, nv);
    let mut w = Vector::zeros(q);
    let mut e = Mat::zeros(q, n);
    let mut rows = Vec::with_capacity(q);
    let bx = &spec.constraints;
    let mut r = 0;
    for i in 0..nn {
        for (upper, sign) in [(true, 1.0), (false, -1.0)] {
            for j in 0..m {
                g[(r, i * m + j)] = sign;
                w[r] = if upper { bx.u_hi[j] } else { -bx.u_lo[j] };
                rows.push(RowInfo { stage: i, kind: RowKind::Input, component: j, upper });
                r += 1;
            }
        }
        for (upper, sign) in [(true, 1.0), (false, -1.0)] {
            for j in 0..n {
                let k = i * n + j;
                g.row_mut(r).copy_from(&(gamma.row(k) * sign));
                e.row_mut(r).copy_from(&(phi.row(k) * -sign));
                w[r] = if upper { bx.x_hi[j] } else { -bx.x_lo[j] };
                rows.push(RowInfo { stage: i, kind: RowKind::State, component: j, upper });
                r += 1;
            }
        }
    }
    let gamma_n = gamma.view((nn * n, 0), (n, nv));
    let phi_n = phi.view((nn * n, 0), (n, n));
    for t in 0..term.rows() {
        let ct = term.c_mat.row(t);
        g.row_mut(r).copy_from(&(ct * gamma_n));
        e.row_mut(r).copy_from(&(-(ct * phi_n)));
        w[r] = term.c_vec[t];
        rows.push(RowInfo { stage: nn, kind: RowKind::Terminal, component: t, upper: true });
        r += 1;
    }
    debug_assert_eq!(r, q);
    if w.iter().any(|&v| v <= 0.0) {
        return Err(ModelError::Validation("origin is not strictly feasible (w must be positive)".into()));
    }
    let param_only: Vec<bool> = (0..q).map(|i| g.row(i).iter().all(|&v| v == 0.0)).collect();

    let h_chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| ModelError::Validation("condensed Hessian is not positive definite".into()))?;
    let l = h_chol.l();
    let j0 = l
        .solve_lower_triangular(&Mat::identity(nv, nv))
        .ok_or_else(|| ModelError::Validation("singular Cholesky factor".into()))?
        .transpose();
    let hinv_ft = h_chol.solve(&f.transpose());
    let hinv_gt = h_chol.solve(&g.transpose());
    let ghg = &g * &hinv_gt;
    let ghg = (&ghg + ghg.transpose()) * 0.5;
    let s = &e + &g * &hinv_ft;

    Ok(QpData {
        n,
        m,
        horizon: nn,
        a: spec.system.a.clone(),
        b: spec.system.b.clone(),
        h,
        f,
        y,
        gt: g.transpose(),
        g,
        w,
        e,
        s,
        rows,
        param_only,
        h_chol,
        j0,
        hinv_ft,
        hinv_gt,
        ghg,
    })
}

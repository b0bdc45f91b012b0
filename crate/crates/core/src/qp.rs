//! Dense strictly convex QP solver for the condensed MPC problem.
//!
//! The dual active-set method of Goldfarb and Idnani starts from the
//! unconstrained minimizer `-H^-1 F'x` and adds violated constraints one at a
//! time, keeping the working set's multipliers nonnegative. It needs no
//! feasible starting point and reports infeasibility as a by-product.

use crate::linalg::{self, Mat, Vector};
use crate::lp;
use crate::model::QpData;

/// Feasibility tolerance, relative to `1 + ‖w + Ex‖∞`.
pub const ACTIVE_TOL: f64 = 1e-8;
/// Slack, relative to `1 + ‖w + Ex‖∞`, below which a row counts as active.
///
/// Rows of the final working set are tight to rounding. Anything looser also
/// catches zero-multiplier rows with small positive slack, and forcing those
/// to equality moves the law of the active set off `U*` at `x`.
pub const CLASSIFY_TOL: f64 = 1e-12;
/// Threshold on `λ_i / (1 + |λ|_inf)` below which an active row is weakly active.
pub const WEAK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("QP is infeasible for this parameter")]
    Infeasible,
    #[error("active-set iteration exceeded {0} steps")]
    MaxIterations(usize),
    #[error("parameter has length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u_star: Vector,
    /// One multiplier per row, zero outside the working set.
    pub lambda: Vector,
    /// Rows with `|G^i U - w^i - E^i x| <= 1e-12 (1 + |w + Ex|_inf)`; rows that
    /// only bound the parameter are never listed.
    pub active: Vec<usize>,
    pub inactive: Vec<usize>,
    pub weakly_active: Vec<usize>,
    /// Full objective including `½x'Yx`.
    pub objective: f64,
    /// Working set at termination, in ascending order.
    pub working_set: Vec<usize>,
    pub iterations: usize,
}

impl QpSolution {
    /// First `m` entries of `U*`.
    pub fn first_input(&self, m: usize) -> Vector {
        self.u_star.rows(0, m).into_owned()
    }
}

/// Residuals of the KKT conditions, all scaled as in [`solve_qp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
    pub stationarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity).max(self.stationarity)
    }
}

/// Solves the QP at parameter `x`.
pub fn solve_qp(qp: &QpData, x: &Vector) -> Result<QpSolution, QpError> {
    if x.len() != qp.n {
        return Err(QpError::Dimension { got: x.len(), expected: qp.n });
    }
    let rhs = qp.rhs(x);
    let scale = 1.0 + rhs.amax();
    // Stage-0 state rows cannot be influenced by U.
    if (0..qp.q()).any(|i| qp.param_only[i] && rhs[i] < -ACTIVE_TOL * scale) {
        return Err(QpError::Infeasible);
    }
    let lin = &qp.f.transpose() * x;
    let mut gi = Gi::new(qp, &rhs, &lin);
    gi.run()?;
    let Gi { u, working, mult, iterations, .. } = gi;

    let q = qp.q();
    let mut lambda = Vector::zeros(q);
    for (k, &i) in working.iter().enumerate() {
        lambda[i] = mult[k].max(0.0);
    }
    let slack = &rhs - &qp.g * &u;
    let tol = CLASSIFY_TOL * scale;
    let mut active = Vec::new();
    let mut inactive = Vec::new();
    for i in 0..q {
        if !qp.param_only[i] && slack[i].abs() <= tol {
            active.push(i);
        } else {
            inactive.push(i);
        }
    }
    let lam_scale = 1.0 + lambda.amax();
    let weakly_active = active.iter().copied().filter(|&i| lambda[i] / lam_scale <= WEAK_TOL).collect();
    let objective = qp.objective(&u, x);
    let mut working_set = working;
    working_set.sort_unstable();
    Ok(QpSolution {
        u_star: u,
        lambda,
        active,
        inactive,
        weakly_active,
        objective,
        working_set,
        iterations,
    })
}

/// Optimal value `V*(x)`.
pub fn value(qp: &QpData, x: &Vector) -> Result<f64, QpError> {
    solve_qp(qp, x).map(|s| s.objective)
}

/// KKT residuals of `sol` at `x`.
pub fn kkt_residuals(qp: &QpData, x: &Vector, sol: &QpSolution) -> KktResiduals {
    let rhs = qp.rhs(x);
    let scale = 1.0 + rhs.amax();
    let slack = &rhs - &qp.g * &sol.u_star;
    let primal = slack.iter().zip(&qp.param_only).filter(|(_, &p)| !p).map(|(s, _)| (-s).max(0.0)).fold(0.0, f64::max) / scale;
    let dual = sol.lambda.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max);
    let complementarity =
        slack.iter().zip(sol.lambda.iter()).map(|(s, l)| (s * l).abs()).fold(0.0, f64::max) / scale;
    let grad = &qp.h * &sol.u_star + qp.f.transpose() * x + &qp.gt * &sol.lambda;
    KktResiduals {
        primal,
        dual,
        complementarity,
        stationarity: grad.amax() / scale,
    }
}

/// Whether the rows `G^A` have full row rank.
pub fn check_licq(qp: &QpData, aset: &[usize]) -> bool {
    if aset.is_empty() {
        return true;
    }
    if aset.len() > qp.nv() || aset.iter().any(|&i| i >= qp.q()) {
        return false;
    }
    let ga = linalg::select_rows(&qp.g, aset);
    let norm = ga.norm();
    if norm == 0.0 {
        return false;
    }
    linalg::rank(&ga.transpose(), 1e-9 * norm) == aset.len()
}

/// Whether some `U` satisfies `GU <= w + Ex`.
///
/// The dual active-set iteration doubles as the phase-1 procedure: it stops
/// with a primal solution or with a certificate that the violated row cannot
/// be satisfied together with the working set. A dense simplex on the
/// max-violation LP was tried first and lost accuracy on the larger plants.
pub fn is_feasible(qp: &QpData, x: &Vector) -> bool {
    match solve_qp(qp, x) {
        Ok(_) => true,
        Err(QpError::Infeasible) => false,
        Err(e) => {
            log::warn!("feasibility test undecided: {e}");
            false
        }
    }
}

/// Smallest uniform violation `min_U max_i (GU - w - Ex)_i`, clipped at zero,
/// from the phase-1 LP.
pub fn max_violation_lp(qp: &QpData, x: &Vector) -> Result<f64, lp::LpError> {
    let rhs = qp.rhs(x);
    let param = (0..qp.q()).filter(|&i| qp.param_only[i]).map(|i| -rhs[i]).fold(0.0, f64::max);
    let rows: Vec<usize> = (0..qp.q()).filter(|&i| !qp.param_only[i]).collect();
    let g = linalg::select_rows(&qp.g, &rows);
    let b = linalg::select_entries(&rhs, &rows);
    Ok(lp::min_max_violation(&g, &b)?.max(param))
}

/// Goldfarb-Idnani working state. Constraints are handled as
/// `n_i'U >= b_i` with `n_i = -G_i'` and `b_i = -(w + Ex)_i`.
struct Gi<'a> {
    qp: &'a QpData,
    rhs: &'a Vector,
    u: Vector,
    /// Columns `0..k` span the working normals after the `H^-1/2` change of
    /// variables; `J' N_A = [R; 0]`.
    j: Mat,
    r: Mat,
    working: Vec<usize>,
    in_working: Vec<bool>,
    skipped: Vec<bool>,
    mult: Vec<f64>,
    iterations: usize,
    tol: f64,
}

impl<'a> Gi<'a> {
    fn new(qp: &'a QpData, rhs: &'a Vector, lin: &Vector) -> Self {
        let nv = qp.nv();
        let u = -qp.h_chol.solve(lin);
        Self {
            qp,
            rhs,
            u,
            j: qp.j0.clone(),
            r: Mat::zeros(nv, nv),
            working: Vec::new(),
            in_working: vec![false; qp.q()],
            skipped: vec![false; qp.q()],
            mult: Vec::new(),
            iterations: 0,
            tol: 1e-11 * (1.0 + rhs.amax()),
        }
    }

    /// `s_i = n_i'U - b_i = rhs_i - G_i U`.
    fn slacks(&self) -> Vector {
        self.rhs - &self.qp.g * &self.u
    }

    fn normal(&self, p: usize) -> Vector {
        -self.qp.gt.column(p)
    }

    fn run(&mut self) -> Result<(), QpError> {
        let q = self.qp.q();
        let max_iter = 50 * q.max(1);
        loop {
            let s = self.slacks();
            let mut p = None;
            let mut worst = -self.tol;
            for i in 0..q {
                if !self.in_working[i] && !self.skipped[i] && !self.qp.param_only[i] && s[i] < worst {
                    worst = s[i];
                    p = Some(i);
                }
            }
            let Some(p) = p else { return Ok(()) };
            self.add_violated(p, s[p], max_iter)?;
        }
    }

    /// Step 2 of the method: move primal and dual variables until `p` is
    /// satisfied (and joins the working set) or proven infeasible.
    fn add_violated(&mut self, p: usize, mut sp: f64, max_iter: usize) -> Result<(), QpError> {
        let np = self.normal(p);
        let nv = self.qp.nv();
        let mut up = 0.0;
        loop {
            self.iterations += 1;
            if self.iterations > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            let k = self.working.len();
            let d = self.j.tr_mul(&np);
            let d2 = d.rows(k, nv - k);
            // n_p'z = |d2|^2; below the threshold n_p is treated as dependent
            // on the working normals and only a dual step is possible.
            let znp = d2.norm_squared();
            let independent = k < nv && znp > 1e-20 * d.norm_squared();
            let r = self.back_substitute(&d, k);
            let rtol = 1e-14 * (1.0 + r.amax());

            let mut t1 = f64::INFINITY;
            let mut l = None;
            for jj in 0..k {
                if r[jj] > rtol {
                    let ratio = self.mult[jj] / r[jj];
                    if ratio < t1 {
                        t1 = ratio;
                        l = Some(jj);
                    }
                }
            }
            let t2 = if independent { (-sp / znp).max(0.0) } else { f64::INFINITY };
            if !t1.is_finite() && !t2.is_finite() {
                // A dependent row violated only at rounding level is left out
                // rather than declaring the problem infeasible.
                if -sp <= ACTIVE_TOL * (1.0 + self.rhs.amax()) {
                    self.skipped[p] = true;
                    return Ok(());
                }
                return Err(QpError::Infeasible);
            }
            let t = t1.min(t2);
            if independent {
                let z = self.j.columns(k, nv - k) * d2;
                self.u.axpy(t, &z, 1.0);
            }
            for jj in 0..k {
                self.mult[jj] = (self.mult[jj] - t * r[jj]).max(0.0);
            }
            up += t;
            if t2 <= t1 {
                self.push(p, &d, up);
                return Ok(());
            }
            if let Some(l) = l {
                self.mult[l] = 0.0;
                self.drop(l);
            }
            sp = self.rhs[p] - self.qp.gt.column(p).dot(&self.u);
        }
    }

    /// Solves `R r = d[0..k]`.
    fn back_substitute(&self, d: &Vector, k: usize) -> Vector {
        let mut r = Vector::zeros(k);
        for i in (0..k).rev() {
            let mut acc = d[i];
            for jj in i + 1..k {
                acc -= self.r[(i, jj)] * r[jj];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    fn rotate_columns(&mut self, a: usize, b: usize, c: f64, s: f64) {
        let nv = self.j.nrows();
        for row in 0..nv {
            let x = self.j[(row, a)];
            let y = self.j[(row, b)];
            self.j[(row, a)] = c * x + s * y;
            self.j[(row, b)] = -s * x + c * y;
        }
    }

    fn push(&mut self, p: usize, d: &Vector, up: f64) {
        let mut d = d.clone();
        let k = self.working.len();
        let nv = self.j.nrows();
        for i in (k + 1..nv).rev() {
            let (a, b) = (d[i - 1], d[i]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[i - 1] = h;
            d[i] = 0.0;
            self.rotate_columns(i - 1, i, c, s);
        }
        for i in 0..=k {
            self.r[(i, k)] = d[i];
        }
        self.working.push(p);
        self.in_working[p] = true;
        self.mult.push(up);
    }

    fn drop(&mut self, l: usize) {
        let k = self.working.len();
        let removed = self.working.remove(l);
        self.in_working[removed] = false;
        self.mult.remove(l);
        for col in l..k - 1 {
            for row in 0..k {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..k {
            self.r[(row, k - 1)] = 0.0;
        }
        // Restore triangular form of the Hessenberg part.
        for jj in l..k - 1 {
            let (a, b) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in jj..k - 1 {
                let x = self.r[(jj, col)];
                let y = self.r[(jj + 1, col)];
                self.r[(jj, col)] = c * x + s * y;
                self.r[(jj + 1, col)] = -s * x + c * y;
            }
            self.rotate_columns(jj, jj + 1, c, s);
        }
    }
}

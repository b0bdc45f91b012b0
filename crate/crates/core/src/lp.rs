//! Dense two-phase simplex for small linear programs.
//!
//! Problems have the form `maximize c'x  s.t.  A x <= b` with free `x`. They
//! are solved through the standard-form dual `minimize b'y  s.t.  A'y = c,
//! y >= 0`, whose tableau has only `dim(x)` rows. That suits the shapes used
//! in this crate: few variables (state dimension, or one horizon of inputs)
//! and many inequality rows.

use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, x: Vector },
    /// The objective is unbounded above on a nonempty feasible set.
    Unbounded,
    Infeasible,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: A is {rows}x{cols}, b has {b_len}, c has {c_len}")]
    Dimension {
        rows: usize,
        cols: usize,
        b_len: usize,
        c_len: usize,
    },
    #[error("simplex did not terminate within {0} pivots")]
    IterationLimit(usize),
}

const PIVOT_TOL: f64 = 1e-11;

struct Tableau {
    rows: usize,
    cols: usize,
    /// Row-major, `cols + 1` entries per row, last entry is the right-hand side.
    data: Vec<f64>,
    basis: Vec<usize>,
    /// Reduced costs, `cols + 1` entries, last entry is minus the objective.
    cost_row: Vec<f64>,
    /// Initial tableau, column-major, for refactorization.
    orig: Mat,
    costs: Vec<f64>,
    since_refresh: usize,
}

/// Pivots between recomputations of the tableau from the original data.
const REFRESH_EVERY: usize = 40;

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.cols + 1) + j]
    }

    #[inline]
    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    /// Recomputes the tableau as `B^-1 [A | b]` for the current basis,
    /// discarding accumulated rounding. Returns false if `B` is singular.
    fn refresh(&mut self) -> bool {
        self.since_refresh = 0;
        let b = Mat::from_fn(self.rows, self.rows, |i, k| self.orig[(i, self.basis[k])]);
        let Some(fresh) = b.lu().solve(&self.orig) else {
            return false;
        };
        let w = self.cols + 1;
        for i in 0..self.rows {
            for j in 0..w {
                self.data[i * w + j] = fresh[(i, j)];
            }
        }
        for (k, &j) in self.basis.iter().enumerate() {
            for i in 0..self.rows {
                self.data[i * w + j] = if i == k { 1.0 } else { 0.0 };
            }
        }
        let costs = std::mem::take(&mut self.costs);
        self.set_costs(&costs);
        true
    }

    fn set_costs(&mut self, cost: &[f64]) {
        self.costs = cost.to_vec();
        let w = self.cols + 1;
        self.cost_row = cost.to_vec();
        self.cost_row.push(0.0);
        for i in 0..self.rows {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.data[i * w..(i + 1) * w];
                for (c, r) in self.cost_row.iter_mut().zip(row) {
                    *c -= cb * r;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, e: usize) {
        let w = self.cols + 1;
        let inv = 1.0 / self.data[r * w + e];
        for v in &mut self.data[r * w..(r + 1) * w] {
            *v *= inv;
        }
        let (head, tail) = self.data.split_at_mut(r * w);
        let (prow, rest) = tail.split_at_mut(w);
        let eliminate = |row: &mut [f64]| {
            let f = row[e];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * p;
                }
                row[e] = 0.0;
            }
        };
        head.chunks_mut(w).for_each(eliminate);
        rest.chunks_mut(w).for_each(eliminate);
        let f = self.cost_row[e];
        if f != 0.0 {
            for (v, p) in self.cost_row.iter_mut().zip(prow.iter()) {
                *v -= f * p;
            }
            self.cost_row[e] = 0.0;
        }
        self.basis[r] = e;
    }

    /// Runs simplex iterations on the current cost row. Columns at or beyond
    /// `allowed` never enter. Returns `Ok(false)` on unboundedness.
    fn optimize(&mut self, allowed: usize, max_iter: usize) -> Result<bool, LpError> {
        let cost_scale = 1.0 + self.cost_row[..allowed].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dtol = 1e-12 * cost_scale;
        let mut degenerate_run = 0usize;
        for _ in 0..max_iter {
            // Dantzig pricing, Bland's rule after repeated degenerate pivots.
            let entering = if degenerate_run > 8 {
                (0..allowed).find(|&j| self.cost_row[j] < -dtol)
            } else {
                let mut best = None;
                let mut best_val = -dtol;
                for j in 0..allowed {
                    if self.cost_row[j] < best_val {
                        best_val = self.cost_row[j];
                        best = Some(j);
                    }
                }
                best
            };
            let Some(e) = entering else {
                if self.since_refresh > 0 && self.refresh() {
                    continue;
                }
                return Ok(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, e);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14 * (1.0 + lr)
                                || (ratio <= lr + 1e-14 * (1.0 + lr) && self.basis[i] < self.basis[li])
                            {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((r, ratio)) = leave else {
                if self.since_refresh > 0 && self.refresh() {
                    continue;
                }
                return Ok(false);
            };
            if ratio <= 1e-14 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, e);
            self.since_refresh += 1;
            if self.since_refresh >= REFRESH_EVERY {
                self.refresh();
            }
        }
        Err(LpError::IterationLimit(max_iter))
    }
}

/// Maximizes `c'x` subject to `A x <= b` over free `x`.
pub fn maximize(a: &Mat, b: &Vector, c: &Vector) -> Result<LpOutcome, LpError> {
    let (r, n) = a.shape();
    if b.len() != r || c.len() != n {
        return Err(LpError::Dimension {
            rows: r,
            cols: n,
            b_len: b.len(),
            c_len: c.len(),
        });
    }
    if n == 0 {
        return Ok(if b.iter().all(|&v| v >= 0.0) {
            LpOutcome::Optimal {
                value: 0.0,
                x: Vector::zeros(0),
            }
        } else {
            LpOutcome::Infeasible
        });
    }
    // Dual tableau: n equality rows over r multipliers plus n artificials.
    let cols = r + n;
    let w = cols + 1;
    let mut data = vec![0.0; n * w];
    let mut sign = vec![1.0; n];
    for i in 0..n {
        sign[i] = if c[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..r {
            data[i * w + j] = sign[i] * a[(j, i)];
        }
        data[i * w + r + i] = 1.0;
        data[i * w + cols] = sign[i] * c[i];
    }
    let orig = Mat::from_fn(n, w, |i, j| data[i * w + j]);
    let mut t = Tableau {
        rows: n,
        cols,
        data,
        basis: (r..r + n).collect(),
        cost_row: Vec::new(),
        orig,
        costs: Vec::new(),
        since_refresh: 0,
    };
    let max_iter = 50 * (r + n) + 1000;

    // Phase 1: drive the artificials out.
    let mut phase1 = vec![0.0; cols];
    phase1[r..].iter_mut().for_each(|v| *v = 1.0);
    t.set_costs(&phase1);
    t.optimize(r, max_iter)?;
    let infeas = -t.cost_row[cols];
    if infeas > 1e-9 * (1.0 + c.amax()) {
        // The dual is infeasible: the primal is unbounded (or itself infeasible).
        return Ok(primal_infeasible_or_unbounded(a, b));
    }
    for i in 0..n {
        if t.basis[i] >= r {
            if let Some(j) = (0..r).find(|&j| t.at(i, j).abs() > 1e-9) {
                t.pivot(i, j);
            }
        }
    }

    // Phase 2 on the dual objective b'y.
    let mut phase2 = vec![0.0; cols];
    phase2[..r].copy_from_slice(b.as_slice());
    t.set_costs(&phase2);
    if !t.optimize(r, max_iter)? {
        return Ok(LpOutcome::Infeasible);
    }
    // Primal solution = simplex multipliers of the dual's equality rows.
    let x = Vector::from_iterator(n, (0..n).map(|i| -sign[i] * t.cost_row[r + i]));
    let value = c.dot(&x);
    Ok(LpOutcome::Optimal { value, x })
}

/// Distinguishes an unbounded primal from an infeasible one with a phase-1
/// problem on the primal rows.
fn primal_infeasible_or_unbounded(a: &Mat, b: &Vector) -> LpOutcome {
    if min_max_violation(a, b).map(|v| v <= 1e-9).unwrap_or(false) {
        LpOutcome::Unbounded
    } else {
        LpOutcome::Infeasible
    }
}

/// Smallest achievable `max_i (A x - b)_i` clipped at zero: 0 when `A x <= b`
/// is feasible, the least uniform violation otherwise.
pub fn min_max_violation(a: &Mat, b: &Vector) -> Result<f64, LpError> {
    let (r, n) = a.shape();
    // maximize -t  s.t.  A x - t 1 <= b,  -t <= 0
    let mut aug = Mat::zeros(r + 1, n + 1);
    aug.view_mut((0, 0), (r, n)).copy_from(a);
    for i in 0..r {
        aug[(i, n)] = -1.0;
    }
    aug[(r, n)] = -1.0;
    let mut rhs = Vector::zeros(r + 1);
    rhs.rows_mut(0, r).copy_from(b);
    let mut obj = Vector::zeros(n + 1);
    obj[n] = -1.0;
    match maximize(&aug, &rhs, &obj)? {
        LpOutcome::Optimal { value, .. } => Ok((-value).max(0.0)),
        // t is bounded below by zero and the problem is always feasible.
        _ => Ok(f64::INFINITY),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> (Mat, Vector) {
        let a = Mat::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        (a, b)
    }

    #[test]
    fn box_maximum_at_vertex() {
        let (a, b) = square();
        let out = maximize(&a, &b, &Vector::from_vec(vec![1.0, -1.0])).unwrap();
        match out {
            LpOutcome::Optimal { value, x } => {
                assert!((value - 5.0).abs() < 1e-12);
                assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] + 4.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unbounded_halfplane() {
        let a = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = Vector::from_vec(vec![1.0]);
        let out = maximize(&a, &b, &Vector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(out, LpOutcome::Unbounded);
    }

    #[test]
    fn infeasible_rows() {
        let a = Mat::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = Vector::from_vec(vec![-1.0, -1.0]);
        let out = maximize(&a, &b, &Vector::from_vec(vec![1.0])).unwrap();
        assert_eq!(out, LpOutcome::Infeasible);
        assert!((min_max_violation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_vertex() {
        // Three constraints through (1, 1).
        let a = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = Vector::from_vec(vec![1.0, 1.0, 2.0]);
        let v = maximize(&a, &b, &Vector::from_vec(vec![1.0, 1.0])).unwrap().value().unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn optimum_is_feasible_and_beats_samples(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 8..20),
            obj in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let r = rows.len();
            let mut a = Mat::zeros(r + 6, 3);
            let mut b = Vector::zeros(r + 6);
            for (i, row) in rows.iter().enumerate() {
                for j in 0..3 { a[(i, j)] = row[j]; }
                b[i] = 1.0;
            }
            for j in 0..3 {
                a[(r + 2 * j, j)] = 1.0;
                a[(r + 2 * j + 1, j)] = -1.0;
                b[r + 2 * j] = 5.0;
                b[r + 2 * j + 1] = 5.0;
            }
            let c = Vector::from_vec(obj);
            let LpOutcome::Optimal { value, x } = maximize(&a, &b, &c).unwrap() else {
                panic!("bounded nonempty problem");
            };
            proptest::prop_assert!((&a * &x - &b).max() <= 1e-9);
            // The origin is feasible, so the optimum is at least 0.
            proptest::prop_assert!(value >= -1e-12);
        }
    }
}

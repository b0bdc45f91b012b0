//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmpc_core::linalg::{self, Mat, Vector};
use rmpc_core::qp;
use rmpc_core::QpData;

/// Exact minimizer found by exhaustive active-set enumeration.
#[derive(Debug, Clone)]
pub struct Enumerated {
    pub u: Vector,
    pub objective: f64,
    pub aset: Vec<usize>,
    pub visited: usize,
}

/// Depth-first enumeration of candidate active sets drawn from `pool`, up
/// to `max_size` rows. Each candidate's equality-constrained problem is
/// solved through `G_A H^-1 G_A'`; a candidate is accepted when its
/// multipliers are nonnegative and its minimizer satisfies every row.
/// Rank-deficient sets are pruned together with all their supersets.
pub fn enumerate_active_sets(qp: &QpData, x: &Vector, pool: &[usize], max_size: usize) -> Option<Enumerated> {
    let rhs = qp.rhs(x);
    let u0 = -(&qp.hinv_ft * x);
    let viol0 = &qp.g * &u0 - &rhs;
    let scale = 1.0 + rhs.amax();
    let mut best: Option<Enumerated> = None;
    let mut visited = 0usize;
    let mut stack: Vec<usize> = Vec::new();
    let mut chol: Vec<Vec<f64>> = Vec::new();

    fn feasible_candidate(
        qp: &QpData,
        rhs: &Vector,
        u0: &Vector,
        viol0: &Vector,
        aset: &[usize],
        chol: &[Vec<f64>],
        scale: f64,
    ) -> Option<Vector> {
        let k = aset.len();
        // M lam = viol0_A with M = L L'
        let mut y = vec![0.0; k];
        for i in 0..k {
            let mut acc = viol0[aset[i]];
            for j in 0..i {
                acc -= chol[i][j] * y[j];
            }
            y[i] = acc / chol[i][i];
        }
        let mut lam = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = y[i];
            for j in i + 1..k {
                acc -= chol[j][i] * lam[j];
            }
            lam[i] = acc / chol[i][i];
        }
        let lam_scale = 1.0 + lam.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if lam.iter().any(|&l| l < -1e-9 * lam_scale) {
            return None;
        }
        let mut u = u0.clone();
        for (i, &row) in aset.iter().enumerate() {
            u.axpy(-lam[i], &qp.hinv_gt.column(row), 1.0);
        }
        let slack = rhs - &qp.g * &u;
        if slack.iter().zip(&qp.param_only).any(|(&s, &p)| !p && s < -1e-9 * scale) {
            return None;
        }
        Some(u)
    }

    // Empty set first.
    if let Some(u) = feasible_candidate(qp, &rhs, &u0, &viol0, &[], &[], scale) {
        best = Some(Enumerated { objective: qp.objective(&u, x), u, aset: vec![], visited: 1 });
    }
    fn dfs(
        qp: &QpData,
        x: &Vector,
        rhs: &Vector,
        u0: &Vector,
        viol0: &Vector,
        pool: &[usize],
        start: usize,
        max_size: usize,
        scale: f64,
        stack: &mut Vec<usize>,
        chol: &mut Vec<Vec<f64>>,
        best: &mut Option<Enumerated>,
        visited: &mut usize,
    ) {
        if stack.len() == max_size {
            return;
        }
        for p in start..pool.len() {
            let row = pool[p];
            // Extend the Cholesky factor of G_A H^-1 G_A' by one row.
            let k = stack.len();
            let mut new_row = vec![0.0; k + 1];
            for j in 0..k {
                let mut acc = qp.ghg[(row, stack[j])];
                for l in 0..j {
                    acc -= new_row[l] * chol[j][l];
                }
                new_row[j] = acc / chol[j][j];
            }
            let diag = qp.ghg[(row, row)] - new_row[..k].iter().map(|v| v * v).sum::<f64>();
            if diag <= 1e-10 * qp.ghg[(row, row)].max(1e-300) {
                continue;
            }
            new_row[k] = diag.sqrt();
            stack.push(row);
            chol.push(new_row);
            *visited += 1;
            if let Some(u) = feasible_candidate(qp, rhs, u0, viol0, stack, chol, scale) {
                let obj = qp.objective(&u, x);
                if best.as_ref().map_or(true, |b| obj < b.objective - 1e-12) {
                    *best = Some(Enumerated { u, objective: obj, aset: stack.clone(), visited: 0 });
                }
            }
            dfs(qp, x, rhs, u0, viol0, pool, p + 1, max_size, scale, stack, chol, best, visited);
            stack.pop();
            chol.pop();
        }
    }
    dfs(qp, x, &rhs, &u0, &viol0, pool, 0, max_size, scale, &mut stack, &mut chol, &mut best, &mut visited);
    best.map(|mut b| {
        b.visited = visited;
        b
    })
}

/// Rows that can move with `U`.
pub fn all_rows(qp: &QpData) -> Vec<usize> {
    (0..qp.q()).filter(|&i| !qp.param_only[i]).collect()
}

/// Approximate dual solution by Hildreth's coordinate ascent, then the rows
/// whose slack at the approximate primal point is below `band`.
pub fn screened_pool(qp: &QpData, x: &Vector, sweeps: usize, band: f64) -> Vec<usize> {
    let rhs = qp.rhs(x);
    let rows = all_rows(qp);
    let u0 = -(&qp.hinv_ft * x);
    let mut lam = vec![0.0; qp.q()];
    let mut u = u0.clone();
    for _ in 0..sweeps {
        for &i in &rows {
            let gi = qp.g.row(i).dot(&u.transpose()) - rhs[i];
            let step = (lam[i] + gi / qp.ghg[(i, i)]).max(0.0);
            let delta = step - lam[i];
            if delta != 0.0 {
                u.axpy(-delta, &qp.hinv_gt.column(i), 1.0);
                lam[i] = step;
            }
        }
    }
    let slack = &rhs - &qp.g * &u;
    rows.into_iter().filter(|&i| slack[i] <= band || lam[i] > 0.0).collect()
}

/// Uniform draws from the state box, kept when the QP is feasible.
pub fn feasible_states(qp: &QpData, x_lo: &Vector, x_hi: &Vector, count: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut draws = 0usize;
    while out.len() < count {
        draws += 1;
        assert!(draws < 10_000_000, "feasible region too thin for rejection sampling");
        let x = Vector::from_fn(x_lo.len(), |i, _| rng.random_range(x_lo[i]..x_hi[i]));
        if qp::is_feasible(qp, &x) {
            out.push(x);
        }
    }
    out
}

pub fn max_abs_diff(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax()
}

pub fn rank_of_rows(g: &Mat, rows: &[usize]) -> usize {
    let sub = linalg::select_rows(g, rows);
    linalg::rank(&sub.transpose(), 1e-9 * sub.norm().max(1e-300))
}

/// Largest `t >= 0` with `T (x + t dir) <= d`, by direct ratio test.
pub fn ray_limit(t_mat: &Mat, d_vec: &Vector, x: &Vector, dir: &Vector) -> f64 {
    let slack = d_vec - t_mat * x;
    let rate = t_mat * dir;
    (0..slack.len())
        .filter(|&i| rate[i] > 0.0)
        .map(|i| slack[i].max(0.0) / rate[i])
        .fold(f64::INFINITY, f64::min)
}

/// Points of `{x : T x <= d}` drawn along random rays from `anchor`, at a
/// uniform fraction (at most `reach`) of the distance to the boundary.
pub fn points_in_polytope(t_mat: &Mat, d_vec: &Vector, anchor: &Vector, count: usize, reach: f64, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = anchor.len();
    (0..count)
        .map(|_| {
            let dir = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let t = ray_limit(t_mat, d_vec, anchor, &dir);
            let t = if t.is_finite() { t } else { 1.0 };
            anchor + dir * (reach * rng.random::<f64>() * t)
        })
        .collect()
}

//! Affine feedback laws and their regions of validity.
//!
//! For an active set `A` with full row rank `G^A`, write `W = (G^A H^-1 G^A')^-1`.
//! Then `U(x) = K̄x + b̄` with
//!
//! ```text
//! K̄ = H^-1 G^A' W S^A - H^-1 F'        b̄ = H^-1 G^A' W w^A
//! ```
//!
//! is the optimal sequence on the polytope `{x : T x <= d}` whose first `|I|`
//! rows keep the inactive constraints satisfied and whose last `|A|` rows
//! keep the multipliers `λ^A = -W (w^A + S^A x)` nonnegative.


use crate::linalg::{self, Mat, Vector};
use crate::model::{remove_redundant_rows, ModelError, Polytope, QpData};
use crate::qp;

/// Condition number of `G^A H^-1 G^A'` beyond which a law is refused.
pub const MAX_CONDITION: f64 = 1e12;
/// Membership tolerance, relative to the size of the tested point.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegionError {
    #[error("active rows are linearly dependent")]
    LicqViolation,
    #[error("G^A H^-1 G^A' is ill conditioned (cond = {0:.3e})")]
    IllConditioned(f64),
    #[error("starting point lies outside the region")]
    OutsideRegion,
    #[error("active set index {0} out of range")]
    BadIndex(usize),
    #[error("malformed active set record")]
    Record,
}

/// What a row of `T x <= d` guards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowMeaning {
    /// Constraint `i` of the QP stays satisfied.
    Primal(usize),
    /// The multiplier of active constraint `i` stays nonnegative.
    Dual(usize),
}

#[derive(Debug, Clone)]
pub struct RegionLaw {
    pub kbar: Mat,
    pub bbar: Vector,
    pub t_mat: Mat,
    pub d_vec: Vector,
    pub gen_aset: Vec<usize>,
    pub inactive: Vec<usize>,
    pub row_meaning: Vec<RowMeaning>,
    /// `1 / ‖T_i‖` (1 for zero rows); membership is tested on normalized rows.
    pub row_scale: Vector,
    m: usize,
}

impl RegionLaw {
    /// Builds the law and region of the active set `aset` (sorted, unique).
    pub fn from_active_set(qp: &QpData, aset: &[usize]) -> Result<Self, RegionError> {
        let q = qp.q();
        if let Some(&bad) = aset.iter().find(|&&i| i >= q) {
            return Err(RegionError::BadIndex(bad));
        }
        let mut aset = aset.to_vec();
        aset.sort_unstable();
        aset.dedup();
        let mut in_a = vec![false; q];
        for &i in &aset {
            in_a[i] = true;
        }
        let inactive: Vec<usize> = (0..q).filter(|&i| !in_a[i]).collect();
        let n = qp.n;
        let k = aset.len();

        if k == 0 {
            let row_meaning = inactive.iter().map(|&i| RowMeaning::Primal(i)).collect();
            let t_mat = -&qp.s;
            return Ok(Self {
                kbar: -&qp.hinv_ft,
                bbar: Vector::zeros(qp.nv()),
                row_scale: row_scale(&t_mat),
                t_mat,
                d_vec: qp.w.clone(),
                gen_aset: aset,
                inactive,
                row_meaning,
                m: qp.m,
            });
        }
        if !qp::check_licq(qp, &aset) {
            return Err(RegionError::LicqViolation);
        }
        let gram = linalg::submatrix(&qp.ghg, &aset, &aset);
        let eig = gram.symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo <= 0.0 {
            return Err(RegionError::LicqViolation);
        }
        let cond = hi / lo;
        if cond > MAX_CONDITION {
            return Err(RegionError::IllConditioned(cond));
        }
        // With M = L^-1 G_A' = QR the Gram matrix is R'R, so its inverse is
        // applied through R alone and the conditioning is not squared.
        let ga_t = Mat::from_fn(qp.nv(), k, |r, c| qp.gt[(r, aset[c])]);
        let qr = (qp.j0.transpose() * ga_t).qr();
        let (qm, rm) = (qr.q(), qr.r());
        let s_a = linalg::select_rows(&qp.s, &aset);
        let w_a = linalg::select_entries(&qp.w, &aset);
        let zs = rm.tr_solve_upper_triangular(&s_a).ok_or(RegionError::LicqViolation)?;
        let zw = rm.tr_solve_upper_triangular(&w_a).ok_or(RegionError::LicqViolation)?;
        let ws = rm.solve_upper_triangular(&zs).ok_or(RegionError::LicqViolation)?;
        let ww = rm.solve_upper_triangular(&zw).ok_or(RegionError::LicqViolation)?;
        let kbar = &qp.j0 * (&qm * &zs) - &qp.hinv_ft;
        let bbar = &qp.j0 * (&qm * &zw);

        let ni = inactive.len();
        let g_i = linalg::select_rows(&qp.g, &inactive);
        let e_i = linalg::select_rows(&qp.e, &inactive);
        let w_i = linalg::select_entries(&qp.w, &inactive);
        let mut t_mat = Mat::zeros(ni + k, n);
        let mut d_vec = Vector::zeros(ni + k);
        t_mat.rows_mut(0, ni).copy_from(&(&g_i * &kbar - e_i));
        d_vec.rows_mut(0, ni).copy_from(&(w_i - &g_i * &bbar));
        t_mat.rows_mut(ni, k).copy_from(&ws);
        d_vec.rows_mut(ni, k).copy_from(&(-&ww));
        let row_meaning = inactive
            .iter()
            .map(|&i| RowMeaning::Primal(i))
            .chain(aset.iter().map(|&i| RowMeaning::Dual(i)))
            .collect();
        Ok(Self {
            kbar,
            bbar,
            row_scale: row_scale(&t_mat),
            t_mat,
            d_vec,
            gen_aset: aset,
            inactive,
            row_meaning,
            m: qp.m,
        })
    }

    pub fn rows(&self) -> usize {
        self.d_vec.len()
    }

    /// `K*`, the first `m` rows of `K̄`.
    pub fn k_star(&self) -> Mat {
        self.kbar.rows(0, self.m).into_owned()
    }

    pub fn b_star(&self) -> Vector {
        self.bbar.rows(0, self.m).into_owned()
    }

    /// Applied input `K* x + b*`.
    pub fn input(&self, x: &Vector) -> Vector {
        self.kbar.rows(0, self.m) * x + self.bbar.rows(0, self.m)
    }

    /// Whole input sequence `K̄ x + b̄`.
    pub fn sequence(&self, x: &Vector) -> Vector {
        &self.kbar * x + &self.bbar
    }

    /// `d - T x`, nonnegative inside.
    pub fn slacks(&self, x: &Vector) -> Vector {
        &self.d_vec - &self.t_mat * x
    }

    /// Multipliers `λ^A(x)` of the generating active set, in `gen_aset` order.
    pub fn multipliers(&self, x: &Vector) -> Vector {
        let k = self.gen_aset.len();
        let ni = self.inactive.len();
        -(self.t_mat.rows(ni, k) * x - self.d_vec.rows(ni, k))
    }

    /// `d - T x` with every row scaled to unit normal, i.e. signed
    /// distances to the facet hyperplanes.
    pub fn normalized_slacks(&self, x: &Vector) -> Vector {
        self.slacks(x).component_mul(&self.row_scale)
    }

    /// Tolerance on the normalized slacks at `x`: `rel (1 + ‖x‖∞)`.
    ///
    /// Offsets `d` of dual rows grow with the conditioning of
    /// `G^A H^-1 G^A'` while their distances to the origin do not, so the
    /// tolerance is an absolute distance rather than a fraction of `‖d‖∞`.
    pub fn tol_at(rel: f64, x: &Vector) -> f64 {
        rel * (1.0 + x.amax())
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.contains_tol(x, Self::tol_at(MEMBERSHIP_TOL, x))
    }

    /// Every normalized slack is at least `-tol`.
    pub fn contains_tol(&self, x: &Vector, tol: f64) -> bool {
        self.normalized_slacks(x).iter().all(|&s| s >= -tol)
    }

    pub fn polytope(&self) -> Polytope {
        Polytope {
            c_mat: self.t_mat.clone(),
            c_vec: self.d_vec.clone(),
        }
    }

    /// The region with redundant rows removed (LP based, can be slow).
    pub fn reduced_polytope(&self) -> Result<Polytope, ModelError> {
        remove_redundant_rows(&self.polytope())
    }

    /// First exit of the segment `x_from -> x_to` from the region.
    pub fn crossed_facet(&self, x_from: &Vector, x_to: &Vector) -> Result<Crossing, RegionError> {
        let tol = Self::tol_at(MEMBERSHIP_TOL, x_from).max(Self::tol_at(MEMBERSHIP_TOL, x_to));
        crossed_facet(&self.t_mat, &self.d_vec, tol, x_from, x_to)
    }
}

/// Result of following a segment through a polytope.
#[derive(Debug, Clone, PartialEq)]
pub enum Crossing {
    Inside,
    /// The segment leaves at parameter `t` through every row in `rows`.
    Exit { t: f64, rows: Vec<usize> },
}

fn row_scale(t_mat: &Mat) -> Vector {
    Vector::from_fn(t_mat.nrows(), |i, _| {
        let norm = t_mat.row(i).norm();
        if norm > 0.0 {
            1.0 / norm
        } else {
            1.0
        }
    })
}

/// First exit of `x_from + t (x_to - x_from)`, `t in (0, 1]`, from
/// `{x : T x <= d}`. `tol` applies to the rows scaled to unit normals.
/// Rows whose exit parameters agree within a relative 1e-9 are reported
/// together.
pub fn crossed_facet(t_mat: &Mat, d_vec: &Vector, tol: f64, x_from: &Vector, x_to: &Vector) -> Result<Crossing, RegionError> {
    let scale = row_scale(t_mat);
    let slack = (d_vec - t_mat * x_from).component_mul(&scale);
    if slack.iter().any(|&s| s < -tol) {
        return Err(RegionError::OutsideRegion);
    }
    let dir = x_to - x_from;
    let rate = (t_mat * &dir).component_mul(&scale);
    let mut best = f64::INFINITY;
    let mut params = Vec::new();
    for i in 0..slack.len() {
        if rate[i] > 0.0 {
            let t = slack[i].max(0.0) / rate[i];
            if t <= 1.0 && slack[i] - rate[i] < -tol {
                params.push((i, t));
                best = best.min(t);
            }
        }
    }
    if params.is_empty() {
        return Ok(Crossing::Inside);
    }
    let band = 1e-9 * best.max(1e-300).max(1e-9);
    let rows = params.into_iter().filter(|&(_, t)| t <= best + band).map(|(i, _)| i).collect();
    Ok(Crossing::Exit { t: best, rows })
}

/// Region of a frozen law extended beyond its polytope: the frozen sequence
/// must stay feasible and its cost `Ĵ` must keep decreasing.
#[derive(Debug, Clone)]
pub struct ExtendedRegion {
    pub base: RegionLaw,
    pub feas_c_mat: Mat,
    pub feas_c_vec: Vector,
    pub quad_m: Mat,
    pub quad_v: Vector,
    pub quad_s: f64,
    pub anchor_cost: f64,
}

impl ExtendedRegion {
    pub fn new(qp: &QpData, law: RegionLaw, anchor_x: &Vector) -> Self {
        let feas_c_mat = &qp.g * &law.kbar - &qp.e;
        let feas_c_vec = &qp.w - &qp.g * &law.bbar;
        let hk = &qp.h * &law.kbar;
        let fk = &qp.f * &law.kbar;
        let quad_m = law.kbar.transpose() * &hk + &fk + fk.transpose() + &qp.y;
        let quad_m = (&quad_m + quad_m.transpose()) * 0.5;
        let quad_v = hk.transpose() * &law.bbar + &qp.f * &law.bbar;
        let quad_s = 0.5 * law.bbar.dot(&(&qp.h * &law.bbar));
        let mut er = Self {
            base: law,
            feas_c_mat,
            feas_c_vec,
            quad_m,
            quad_v,
            quad_s,
            anchor_cost: 0.0,
        };
        er.anchor_cost = er.frozen_cost(anchor_x);
        er
    }

    /// `Ĵ(x)`: QP objective of the sequence `K̄x + b̄`.
    pub fn frozen_cost(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.quad_m * x)) + self.quad_v.dot(x) + self.quad_s
    }

    pub fn is_feasible(&self, x: &Vector) -> bool {
        let tol = MEMBERSHIP_TOL * (1.0 + self.feas_c_vec.amax());
        (&self.feas_c_mat * x - &self.feas_c_vec).iter().all(|&v| v <= tol)
    }

    /// Feasibility of the frozen sequence and `Ĵ(x) <= carried_bound - prev_stage_cost`.
    pub fn contains(&self, x: &Vector, carried_bound: f64, prev_stage_cost: f64) -> bool {
        let bound = carried_bound - prev_stage_cost;
        self.is_feasible(x) && self.frozen_cost(x) <= bound + MEMBERSHIP_TOL * (1.0 + bound.abs())
    }
}

/// Binary record of an active set: count then indices, all `u32` little endian.
pub fn encode_aset_record(aset: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (aset.len() + 1));
    out.extend_from_slice(&(aset.len() as u32).to_le_bytes());
    for &i in aset {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    out
}

pub fn decode_aset_record(bytes: &[u8]) -> Result<Vec<usize>, RegionError> {
    let word = |k: usize| -> Option<u32> { bytes.get(4 * k..4 * k + 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])) };
    let count = word(0).ok_or(RegionError::Record)? as usize;
    if bytes.len() != 4 * (count + 1) {
        return Err(RegionError::Record);
    }
    Ok((1..=count).map(|k| word(k).unwrap() as usize).collect())
}

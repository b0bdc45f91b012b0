//! Plant models, terminal ingredients and the condensed MPC quadratic program.

mod condense;
mod dare;
mod realize;
mod terminal;
mod zoh;

pub use condense::{condense, QpData, RowInfo, RowKind};
pub use dare::{solve_dare, DareSolution};
pub use realize::{realize_transfer_function, Rational, TransferMatrix};
pub use terminal::{compute_terminal_set, remove_redundant_rows, TERMINAL_MAX_ITER};
pub use zoh::discretize_zoh;

use crate::linalg::{self, Mat, Vector};
use crate::lp::LpError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("non-finite entries in the matrix exponential")]
    NumericOverflow,
    #[error("Riccati equation has no stabilizing solution: {0}")]
    NoSolution(String),
    #[error("terminal set iteration did not converge within {0} steps")]
    Termination(usize),
    #[error(transparent)]
    Lp(#[from] LpError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Continuous-time plant `dx/dt = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl ContinuousSystem {
    /// Full-state output (`C = I`, `D = 0`).
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        Self::with_output(a, b, Mat::identity(n, n), Mat::zeros(n, m))
    }

    pub fn with_output(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(ModelError::Validation(format!("A_c must be square and nonempty, got {:?}", a.shape())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(ModelError::Validation(format!("B_c must be {n}xm with m >= 1, got {:?}", b.shape())));
        }
        if c.ncols() != n || d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(ModelError::Validation("output matrices do not match A_c/B_c".into()));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Frequency response `C (sI - A)^-1 B + D` at a complex point `s`.
    pub fn frequency_response(&self, s: nalgebra::Complex<f64>) -> nalgebra::DMatrix<nalgebra::Complex<f64>> {
        use nalgebra::Complex;
        let n = self.n();
        let to_c = |m: &Mat| m.map(|v| Complex::new(v, 0.0));
        let si_a = nalgebra::DMatrix::<Complex<f64>>::identity(n, n) * s - to_c(&self.a);
        let x = si_a
            .lu()
            .solve(&to_c(&self.b))
            .expect("sI - A singular at the evaluation point");
        to_c(&self.c) * x + to_c(&self.d)
    }
}

/// Discrete-time plant `x(k+1) = A x(k) + B u(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    pub a: Mat,
    pub b: Mat,
    /// Sampling time in seconds.
    pub ts: f64,
}

impl DiscreteSystem {
    pub fn new(a: Mat, b: Mat, ts: f64) -> Result<Self> {
        if a.nrows() == 0 || !a.is_square() || b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(ModelError::Validation(format!(
                "inconsistent dimensions A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if !(ts > 0.0) {
            return Err(ModelError::Validation(format!("sampling time must be positive, got {ts}")));
        }
        Ok(Self { a, b, ts })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }

    /// Checks the Hautus test for every eigenvalue with modulus >= 1.
    pub fn is_stabilizable(&self) -> bool {
        let n = self.n();
        let eig = self.a.complex_eigenvalues();
        eig.iter().filter(|z| z.norm() >= 1.0 - 1e-12).all(|&lambda| {
            use nalgebra::Complex;
            let mut h = nalgebra::DMatrix::<Complex<f64>>::zeros(n, n + self.m());
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] = Complex::new(self.a[(i, j)], 0.0) - if i == j { lambda } else { Complex::new(0.0, 0.0) };
                }
                for j in 0..self.m() {
                    h[(i, n + j)] = Complex::new(self.b[(i, j)], 0.0);
                }
            }
            let sv = h.singular_values();
            let tol = 1e-9 * sv.iter().cloned().fold(1.0, f64::max);
            sv.iter().filter(|&&s| s > tol).count() == n
        })
    }
}

/// Box constraints on states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraints {
    pub x_lo: Vector,
    pub x_hi: Vector,
    pub u_lo: Vector,
    pub u_hi: Vector,
}

impl BoxConstraints {
    pub fn new(x_lo: Vector, x_hi: Vector, u_lo: Vector, u_hi: Vector) -> Result<Self> {
        if x_lo.len() != x_hi.len() || u_lo.len() != u_hi.len() {
            return Err(ModelError::Validation("bound vectors differ in length".into()));
        }
        let origin_inside = x_lo.iter().chain(u_lo.iter()).all(|&v| v < 0.0)
            && x_hi.iter().chain(u_hi.iter()).all(|&v| v > 0.0);
        if !origin_inside {
            return Err(ModelError::Validation("box must contain the origin in its interior".into()));
        }
        Ok(Self { x_lo, x_hi, u_lo, u_hi })
    }

    /// Symmetric box `|x_i| <= x_max_i`, `|u_j| <= u_max_j`.
    pub fn symmetric(x_max: Vector, u_max: Vector) -> Result<Self> {
        Self::new(-x_max.clone(), x_max, -u_max.clone(), u_max)
    }

    pub fn n(&self) -> usize {
        self.x_lo.len()
    }

    pub fn m(&self) -> usize {
        self.u_lo.len()
    }

    pub fn contains_state(&self, x: &Vector, tol: f64) -> bool {
        x.iter()
            .zip(self.x_lo.iter().zip(self.x_hi.iter()))
            .all(|(&v, (&lo, &hi))| v >= lo - tol && v <= hi + tol)
    }

    pub fn contains_input(&self, u: &Vector, tol: f64) -> bool {
        u.iter()
            .zip(self.u_lo.iter().zip(self.u_hi.iter()))
            .all(|(&v, (&lo, &hi))| v >= lo - tol && v <= hi + tol)
    }

    /// The state box as a polytope `{x : Cx <= c}` (upper rows, then lower rows).
    pub fn state_polytope(&self) -> Polytope {
        let n = self.n();
        let mut c_mat = Mat::zeros(2 * n, n);
        let mut c_vec = Vector::zeros(2 * n);
        for i in 0..n {
            c_mat[(i, i)] = 1.0;
            c_vec[i] = self.x_hi[i];
            c_mat[(n + i, i)] = -1.0;
            c_vec[n + i] = -self.x_lo[i];
        }
        Polytope { c_mat, c_vec }
    }
}

/// Halfspace representation `{x : C x <= c}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub c_mat: Mat,
    pub c_vec: Vector,
}

impl Polytope {
    pub fn new(c_mat: Mat, c_vec: Vector) -> Result<Self> {
        if c_mat.nrows() != c_vec.len() {
            return Err(ModelError::Validation(format!(
                "{} rows but {} offsets",
                c_mat.nrows(),
                c_vec.len()
            )));
        }
        Ok(Self { c_mat, c_vec })
    }

    pub fn rows(&self) -> usize {
        self.c_vec.len()
    }

    pub fn dim(&self) -> usize {
        self.c_mat.ncols()
    }

    /// Largest value of `C x - c` over the rows (nonpositive inside).
    pub fn max_violation(&self, x: &Vector) -> f64 {
        (&self.c_mat * x - &self.c_vec).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        self.rows() == 0 || self.max_violation(x) <= tol
    }
}

/// Everything needed to pose the MPC problem for one plant.
#[derive(Debug, Clone)]
pub struct MpcSpec {
    pub system: DiscreteSystem,
    pub q: Mat,
    pub r: Mat,
    pub p: Mat,
    pub horizon: usize,
    pub constraints: BoxConstraints,
    pub terminal: Polytope,
    /// Unconstrained LQR gain `u = K x` associated with `p`.
    pub k_lqr: Mat,
}

impl MpcSpec {
    /// Builds the spec with `P` from the Riccati equation and the maximal
    /// admissible LQR set as terminal set.
    pub fn with_lqr_terminal(
        system: DiscreteSystem,
        q: Mat,
        r: Mat,
        horizon: usize,
        constraints: BoxConstraints,
    ) -> Result<Self> {
        let dare = solve_dare(&system.a, &system.b, &q, &r)?;
        let terminal = compute_terminal_set(&system, &dare.k, &constraints)?;
        let spec = Self {
            system,
            q,
            r,
            p: dare.p,
            horizon,
            constraints,
            terminal,
            k_lqr: dare.k,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn m(&self) -> usize {
        self.system.m()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        let check_pd = |name: &str, mat: &Mat, dim: usize| -> Result<()> {
            if mat.shape() != (dim, dim) {
                return Err(ModelError::Validation(format!("{name} must be {dim}x{dim}, got {:?}", mat.shape())));
            }
            if !linalg::is_symmetric(mat, 1e-9) {
                return Err(ModelError::Validation(format!("{name} is not symmetric")));
            }
            if linalg::min_symmetric_eigenvalue(mat) <= 0.0 {
                return Err(ModelError::Validation(format!("{name} is not positive definite")));
            }
            Ok(())
        };
        check_pd("Q", &self.q, n)?;
        check_pd("R", &self.r, m)?;
        check_pd("P", &self.p, n)?;
        if self.horizon == 0 {
            return Err(ModelError::Validation("horizon must be at least 1".into()));
        }
        if self.constraints.n() != n || self.constraints.m() != m {
            return Err(ModelError::Validation("constraint box does not match the plant".into()));
        }
        if self.terminal.dim() != n || self.k_lqr.shape() != (m, n) {
            return Err(ModelError::Validation("terminal ingredients do not match the plant".into()));
        }
        Ok(())
    }

    /// Stage cost `x'Qx + u'Ru`.
    pub fn stage_cost(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    /// Closed loop matrix `A + B K_lqr`.
    pub fn lqr_closed_loop(&self) -> Mat {
        &self.system.a + &self.system.b * &self.k_lqr
    }
}

//! Closed-loop rollouts, initial-state sampling and per-trajectory metrics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Mat, Vector};
use crate::lp::{self, LpOutcome};
use crate::model::{BoxConstraints, MpcSpec, QpData};
use crate::qp;
use crate::strategies::{self, Controller, StepOutcome, Strategy, StrategyOptions};

/// Draws after which a box sampler with acceptance below `MIN_ACCEPTANCE` gives up.
pub const MAX_DRAWS: u64 = 1_000_000;
pub const MIN_ACCEPTANCE: f64 = 1e-4;
/// Draws spent by `SamplingMode::Auto` to estimate the box acceptance rate.
pub const PROBE_DRAWS: usize = 200;
/// Probe acceptance below which `Auto` abandons plain box sampling.
pub const PROBE_MIN_RATE: f64 = 0.01;
/// Largest `n + mN` for which `Auto` computes the bounding box of `X_f` by LP.
pub const BBOX_MAX_DIM: usize = 64;
const RADIAL_BISECTIONS: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("acceptance rate {accepted}/{draws} is below {MIN_ACCEPTANCE}")]
    LowAcceptance { accepted: u64, draws: u64 },
    #[error("bounding box of the feasible set could not be computed: {0}")]
    BoundingBox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Uniform in the state box, rejected unless feasible.
    Box,
    /// Uniform in the bounding box of the feasible set, rejected unless feasible.
    Bbox,
    /// Uniform direction in the state box, scaled into the feasible set.
    Radial,
    /// `Box` when its acceptance rate is workable, otherwise `Bbox` or `Radial`.
    #[default]
    Auto,
}

/// Deterministic stream of feasible initial states.
#[derive(Debug, Clone)]
pub struct StateSampler {
    mode: SamplingMode,
    lo: Vector,
    hi: Vector,
    rng: ChaCha8Rng,
    draws: u64,
    accepted: u64,
}

impl StateSampler {
    pub fn new(qp: &QpData, bx: &BoxConstraints, seed: u64, mode: SamplingMode) -> Result<Self, SamplingError> {
        let (mode, lo, hi) = match mode {
            SamplingMode::Auto => resolve_auto(qp, bx, seed)?,
            SamplingMode::Bbox => {
                let (lo, hi) = feasible_bounding_box(qp)?;
                (SamplingMode::Bbox, lo, hi)
            }
            other => (other, bx.x_lo.clone(), bx.x_hi.clone()),
        };
        Ok(Self {
            mode,
            lo,
            hi,
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
            accepted: 0,
        })
    }

    /// The mode actually in use (never `Auto`).
    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    /// `(accepted, drawn)` candidates so far in the rejection modes.
    pub fn acceptance(&self) -> (u64, u64) {
        (self.accepted, self.draws)
    }

    fn uniform(&mut self) -> Vector {
        let (lo, hi) = (&self.lo, &self.hi);
        let rng = &mut self.rng;
        Vector::from_fn(lo.len(), |i, _| if hi[i] > lo[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] })
    }

    pub fn next_state(&mut self, qp: &QpData) -> Result<Vector, SamplingError> {
        if self.mode == SamplingMode::Radial {
            let z = self.uniform();
            let rho: f64 = self.rng.random::<f64>().powf(1.0 / qp.n as f64);
            return Ok(radial_limit(qp, &z) * rho * z);
        }
        loop {
            let x = self.uniform();
            self.draws += 1;
            if qp::is_feasible(qp, &x) {
                self.accepted += 1;
                return Ok(x);
            }
            if self.draws % MAX_DRAWS == 0 && (self.accepted as f64) < MIN_ACCEPTANCE * self.draws as f64 {
                return Err(SamplingError::LowAcceptance { accepted: self.accepted, draws: self.draws });
            }
        }
    }

    pub fn take(&mut self, qp: &QpData, count: usize) -> Result<Vec<Vector>, SamplingError> {
        (0..count).map(|_| self.next_state(qp)).collect()
    }
}

/// A feasible state drawn uniformly from the state box by rejection.
pub fn sample_feasible_state(qp: &QpData, bx: &BoxConstraints, seed: u64) -> Result<Vector, SamplingError> {
    StateSampler::new(qp, bx, seed, SamplingMode::Box)?.next_state(qp)
}

fn resolve_auto(qp: &QpData, bx: &BoxConstraints, seed: u64) -> Result<(SamplingMode, Vector, Vector), SamplingError> {
    let probe_seed = seed ^ 0x5eed_0f_a11_0be;
    let rate = |lo: &Vector, hi: &Vector| {
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let hits = (0..PROBE_DRAWS)
            .filter(|_| {
                let x = Vector::from_fn(lo.len(), |i, _| if hi[i] > lo[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] });
                qp::is_feasible(qp, &x)
            })
            .count();
        hits as f64 / PROBE_DRAWS as f64
    };
    if rate(&bx.x_lo, &bx.x_hi) >= PROBE_MIN_RATE {
        return Ok((SamplingMode::Box, bx.x_lo.clone(), bx.x_hi.clone()));
    }
    if qp.n + qp.nv() <= BBOX_MAX_DIM {
        if let Ok((lo, hi)) = feasible_bounding_box(qp) {
            if rate(&lo, &hi) >= PROBE_MIN_RATE {
                return Ok((SamplingMode::Bbox, lo, hi));
            }
        }
    }
    log::info!("sampling initial states radially (box acceptance below {PROBE_MIN_RATE})");
    Ok((SamplingMode::Radial, bx.x_lo.clone(), bx.x_hi.clone()))
}

/// Coordinate bounds of `X_f = {x : exists U, GU - Ex <= w}`.
pub fn feasible_bounding_box(qp: &QpData) -> Result<(Vector, Vector), SamplingError> {
    let (n, nv, q) = (qp.n, qp.nv(), qp.q());
    let mut a = Mat::zeros(q, n + nv);
    a.columns_mut(0, n).copy_from(&(-&qp.e));
    a.columns_mut(n, nv).copy_from(&qp.g);
    let mut lo = Vector::zeros(n);
    let mut hi = Vector::zeros(n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut c = Vector::zeros(n + nv);
            c[i] = sign;
            let value = match lp::maximize(&a, &qp.w, &c).map_err(|e| SamplingError::BoundingBox(e.to_string()))? {
                LpOutcome::Optimal { value, .. } => value,
                other => return Err(SamplingError::BoundingBox(format!("{other:?}"))),
            };
            if sign > 0.0 {
                hi[i] = value;
            } else {
                lo[i] = -value;
            }
        }
    }
    Ok((lo, hi))
}

/// Largest `α in [0, 1]` (to bisection accuracy, from below) with `α z` feasible.
fn radial_limit(qp: &QpData, z: &Vector) -> f64 {
    if qp::is_feasible(qp, z) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..RADIAL_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if qp::is_feasible(qp, &(z * mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Default step cap: `10 N (1 + ceil(-3 / log10 ρ))`, at least 500, with ρ
/// the spectral radius of the LQR closed loop.
pub fn default_max_steps(spec: &MpcSpec) -> usize {
    let rho = linalg::spectral_radius(&spec.lqr_closed_loop());
    let settle = if rho > 0.0 && rho < 1.0 { (-3.0 / rho.log10()).ceil() } else { 0.0 };
    let steps = 10.0 * spec.horizon as f64 * (1.0 + settle);
    if steps.is_finite() {
        (steps as usize).max(500)
    } else {
        500
    }
}

/// Anything that maps a measured state to an input for one step.
pub trait StepController {
    fn control(&mut self, x: &Vector) -> Result<StepOutcome, StepError>;
}

pub type StepError = Box<dyn std::error::Error + Send + Sync>;

/// In-process controller bound to its QP.
pub struct Monolithic<'a> {
    pub qp: &'a QpData,
    pub controller: Controller,
}

impl<'a> Monolithic<'a> {
    pub fn new(spec: &MpcSpec, qp: &'a QpData, strategy: Strategy, opts: StrategyOptions) -> Self {
        Self { qp, controller: Controller::new(spec, strategy, opts) }
    }
}

impl StepController for Monolithic<'_> {
    fn control(&mut self, x: &Vector) -> Result<StepOutcome, StepError> {
        Ok(self.controller.step(self.qp, x)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub outcomes: Vec<StepOutcome>,
    pub terminal_entry_step: usize,
    pub converged_step: usize,
    pub wall_time: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("no convergence within {max_steps} steps")]
    NonConvergence { max_steps: usize, partial: Box<Trajectory> },
    #[error("controller failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: StepError,
    },
}

/// Runs the closed loop from `x0` until `‖x‖₂ <= eps`.
pub fn rollout_with(
    spec: &MpcSpec,
    ctrl: &mut dyn StepController,
    x0: &Vector,
    eps: f64,
    max_steps: usize,
) -> Result<Trajectory, RolloutError> {
    let started = Instant::now();
    let mut tr = Trajectory::default();
    let mut terminal: Option<usize> = None;
    let mut x = x0.clone();
    for k in 0..=max_steps {
        if terminal.is_none() && spec.terminal.contains(&x, 1e-9) {
            terminal = Some(k);
        }
        tr.states.push(x.clone());
        if x.norm() <= eps {
            tr.converged_step = k;
            tr.terminal_entry_step = terminal.unwrap_or(k);
            tr.wall_time = started.elapsed().as_secs_f64();
            return Ok(tr);
        }
        if k == max_steps {
            break;
        }
        let out = ctrl.control(&x).map_err(|source| RolloutError::Step { step: k, source })?;
        x = spec.system.step(&x, &out.u);
        tr.inputs.push(out.u.clone());
        tr.outcomes.push(out);
    }
    tr.converged_step = max_steps;
    tr.terminal_entry_step = terminal.unwrap_or(max_steps);
    tr.wall_time = started.elapsed().as_secs_f64();
    Err(RolloutError::NonConvergence { max_steps, partial: Box::new(tr) })
}

pub fn rollout(
    spec: &MpcSpec,
    qp: &QpData,
    strategy: Strategy,
    opts: StrategyOptions,
    x0: &Vector,
    eps: f64,
    max_steps: usize,
) -> Result<Trajectory, RolloutError> {
    let mut ctrl = Monolithic::new(spec, qp, strategy, opts);
    rollout_with(spec, &mut ctrl, x0, eps, max_steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub n_steps: usize,
    pub n_qp: usize,
    pub n_reuse: usize,
    /// `None` when the trajectory starts in the terminal set.
    pub reusability: Option<f64>,
    pub requests: usize,
    pub payload_bytes: usize,
    pub wall_time: f64,
}

/// Bytes per transmitted active set.
pub fn bytes_per_set(q: usize) -> usize {
    q.div_ceil(8)
}

impl RolloutMetrics {
    /// Counts central-node requests (QP solves) and the active-set bytes
    /// they return.
    pub fn from_trajectory(tr: &Trajectory, q: usize) -> Self {
        let n_qp = tr.outcomes.iter().filter(|o| o.qp_solved).count();
        let payload_sets: usize = tr.outcomes.iter().filter(|o| o.qp_solved).map(|o| o.aset_payload.len()).sum();
        Self {
            n_steps: tr.outcomes.len(),
            n_qp,
            n_reuse: tr.outcomes.iter().filter(|o| o.reused).count(),
            reusability: strategies::reuse_stats(&tr.outcomes, tr.terminal_entry_step),
            requests: n_qp,
            payload_bytes: payload_sets * bytes_per_set(q),
            wall_time: tr.wall_time,
        }
    }
}

/// Means over trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trajectories: usize,
    /// Mean over trajectories with a defined reusability.
    pub reusability: Option<f64>,
    pub reusability_defined: usize,
    pub requests: f64,
    pub payload_bytes: f64,
    pub n_qp: f64,
    pub steps: f64,
    /// Mean wall time per step, seconds.
    pub step_time: f64,
}

pub fn aggregate(metrics: &[RolloutMetrics]) -> Option<Summary> {
    if metrics.is_empty() {
        return None;
    }
    let count = metrics.len() as f64;
    let mean = |f: &dyn Fn(&RolloutMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / count;
    let defined: Vec<f64> = metrics.iter().filter_map(|m| m.reusability).collect();
    let total_steps: usize = metrics.iter().map(|m| m.n_steps).sum();
    let total_time: f64 = metrics.iter().map(|m| m.wall_time).sum();
    Some(Summary {
        trajectories: metrics.len(),
        reusability: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        reusability_defined: defined.len(),
        requests: mean(&|m| m.requests as f64),
        payload_bytes: mean(&|m| m.payload_bytes as f64),
        n_qp: mean(&|m| m.n_qp as f64),
        steps: mean(&|m| m.n_steps as f64),
        step_time: if total_steps > 0 { total_time / total_steps as f64 } else { 0.0 },
    })
}

/// One CSV row per trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub system: String,
    pub strategy: String,
    pub start: usize,
    pub steps: usize,
    pub terminal_entry_step: usize,
    pub n_qp: usize,
    pub reusability: Option<f64>,
    pub requests: usize,
    pub payload_bytes: usize,
    pub converged: bool,
    pub wall_ms: f64,
}

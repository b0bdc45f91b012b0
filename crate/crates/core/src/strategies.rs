//! Regional controllers: decide per step whether a QP has to be solved.
//!
//! Every controller is split into the part that needs a QP solver (`plan`,
//! run by the central node in the networked setting) and the part that only
//! evaluates laws (`Controller::try_reuse` and `Controller::install`, run by
//! the local node). The monolithic `Controller::step` chains the two in
//! process, so networked and monolithic runs apply the same floating-point
//! operations.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Mat, Vector};
use crate::model::{MpcSpec, QpData, RowInfo, RowKind};
use crate::qp::{self, QpError, QpSolution, WEAK_TOL};
use crate::regions::{Crossing, ExtendedRegion, RegionLaw, RowMeaning};

/// Absolute tolerance when comparing first-input laws `(K*, b*)`.
pub const LAW_MATCH_TOL: f64 = 1e-9;
/// Slack required of a shifted law at the predicted state.
pub const SEQUENCE_TOL: f64 = 1e-8;
/// Crossings followed in one line walk before giving up.
pub const MAX_LINE_UPDATES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Basic,
    Common,
    Asu,
    Closeq,
    Nlregion,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Basic, Strategy::Common, Strategy::Asu, Strategy::Closeq, Strategy::Nlregion];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Basic => "basic",
            Strategy::Common => "common",
            Strategy::Asu => "asu",
            Strategy::Closeq => "closeq",
            Strategy::Nlregion => "nlregion",
        }
    }

    /// One-byte wire tag.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy {0:?}")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyOptions {
    /// Polytopes per law in the common-law union, the solved one included.
    pub limit: usize,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self { limit: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u: Vector,
    pub reused: bool,
    pub qp_solved: bool,
    pub laws_in_cache: usize,
    /// Active sets produced this step: the transmitted sets on a solve, the
    /// locally updated sets on an `asu` line walk.
    pub aset_payload: Vec<Vec<usize>>,
}

/// What the solving side hands to the evaluating side.
#[derive(Debug, Clone)]
pub struct Plan {
    pub status: PlanStatus,
    pub sets: Vec<Vec<usize>>,
    /// Laws of `sets`, when already built by the planner.
    pub laws: Vec<RegionLaw>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanStatus {
    Ok,
    /// The solved active set violates LICQ; the first input of `U*` is
    /// carried so the loop can still be closed.
    LicqFail { u: Vector },
}

/// Solves the QP at `x` and produces the active sets the strategy ships.
pub fn plan(qp: &QpData, strategy: Strategy, opts: &StrategyOptions, x: &Vector) -> Result<Plan, QpError> {
    let sol = qp::solve_qp(qp, x)?;
    Ok(plan_from_solution(qp, strategy, opts, x, &sol))
}

pub fn plan_from_solution(qp: &QpData, strategy: Strategy, opts: &StrategyOptions, x: &Vector, sol: &QpSolution) -> Plan {
    let base = match RegionLaw::from_active_set(qp, &sol.active) {
        Ok(law) => law,
        Err(err) => {
            log::debug!("no law for active set of size {}: {err}", sol.active.len());
            return Plan {
                status: PlanStatus::LicqFail { u: sol.first_input(qp.m) },
                sets: Vec::new(),
                laws: Vec::new(),
            };
        }
    };
    let laws = match strategy {
        Strategy::Basic | Strategy::Asu | Strategy::Nlregion => vec![base],
        Strategy::Common => explore_common(qp, base, opts.limit),
        Strategy::Closeq => closed_loop_sequence(qp, base, &sol.u_star, x),
    };
    Plan {
        status: PlanStatus::Ok,
        sets: laws.iter().map(|l| l.gen_aset.clone()).collect(),
        laws,
    }
}

fn same_first_input(a: &RegionLaw, b: &RegionLaw, m: usize) -> bool {
    let k = a.kbar.rows(0, m).iter().zip(b.kbar.rows(0, m).iter()).all(|(p, q)| (p - q).abs() <= LAW_MATCH_TOL);
    k && a.bbar.rows(0, m).iter().zip(b.bbar.rows(0, m).iter()).all(|(p, q)| (p - q).abs() <= LAW_MATCH_TOL)
}

/// Neighbors of `law` whose first-input law can coincide with it.
///
/// Adding constraint `c` changes the sequence by a multiple of
/// `v = P H^-1 G_c' / σ` with `P = I - H^-1 G_A' W G_A` and Schur complement
/// `σ = G_c P H^-1 G_c'`; dropping active constraint `j` changes it by a
/// multiple of `H^-1 G_A' W e_j / W_jj`. Toggles whose direction does not
/// vanish in the first `m` entries, and additions with `σ` numerically zero
/// (dependent rows), are skipped without building a law.
fn candidate_toggles(qp: &QpData, law: &RegionLaw) -> Vec<Vec<usize>> {
    const SCREEN: f64 = 1e-7;
    const DEPENDENT: f64 = 1e-9;
    let m = qp.m;
    let aset = &law.gen_aset;
    let mut out = Vec::new();
    let cols: Vec<usize> = law.inactive.iter().copied().filter(|&c| !qp.param_only[c]).collect();
    if aset.is_empty() {
        for &c in &cols {
            let top = qp.hinv_gt.column(c).rows(0, m).amax();
            if top <= SCREEN * DEPENDENT * qp.ghg[(c, c)] {
                out.push(vec![c]);
            }
        }
        return out;
    }
    let gram = linalg::submatrix(&qp.ghg, aset, aset);
    let Some(chol) = Cholesky::new(gram) else {
        return out;
    };
    let k = aset.len();
    // Rows of (H^-1 G_A' W)[first m, :]' = W (H^-1 G_A')[first m, :]'.
    let ma_top = Mat::from_fn(k, m, |r, c| qp.hinv_gt[(c, aset[r])]);
    let qm = chol.solve(&ma_top);
    for (j, &c) in aset.iter().enumerate() {
        let mut e = Vector::zeros(k);
        e[j] = 1.0;
        let w_jj = chol.solve(&e)[j];
        let natural = ma_top.row(j).amax() / qp.ghg[(c, c)];
        if qm.row(j).amax() / w_jj <= SCREEN * (1.0 + natural) {
            out.push(aset.iter().copied().filter(|&a| a != c).collect());
        }
    }
    let ghg_ai = linalg::submatrix(&qp.ghg, aset, &cols);
    let shift = qm.transpose() * &ghg_ai;
    for (idx, &c) in cols.iter().enumerate() {
        let col_top = qp.hinv_gt.column(c).rows(0, m).into_owned();
        let v_top = &col_top - shift.column(idx);
        let g_cc = qp.ghg[(c, c)];
        let natural = col_top.amax() / g_cc;
        // Cheap pre-screen: a small σ can only make v / σ larger.
        if v_top.amax() > SCREEN * (1.0 + natural) * g_cc {
            continue;
        }
        let sigma = g_cc - ghg_ai.column(idx).dot(&chol.solve(&ghg_ai.column(idx).into_owned()));
        if sigma <= DEPENDENT * g_cc {
            continue;
        }
        if v_top.amax() / sigma <= SCREEN * (1.0 + natural) {
            let mut next = aset.clone();
            next.push(c);
            next.sort_unstable();
            out.push(next);
        }
    }
    out
}

/// Breadth-first union of polytopes sharing the first-input law of `base`.
fn explore_common(qp: &QpData, base: RegionLaw, limit: usize) -> Vec<RegionLaw> {
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(base.gen_aset.clone());
    let mut laws = vec![base];
    let mut next = 0;
    while next < laws.len() && laws.len() < limit {
        for cand in candidate_toggles(qp, &laws[next]) {
            if laws.len() >= limit {
                break;
            }
            if !seen.insert(cand.clone()) {
                continue;
            }
            if let Ok(law) = RegionLaw::from_active_set(qp, &cand) {
                if same_first_input(&law, &laws[0], qp.m) {
                    laws.push(law);
                }
            }
        }
        next += 1;
    }
    laws
}

/// Stage-shifted active sets along the predicted closed loop.
///
/// Returns `base` followed by the laws for steps `1, 2, …` that were
/// validated at the predicted states. Nothing is appended when a terminal
/// row is active.
fn closed_loop_sequence(qp: &QpData, base: RegionLaw, u_star: &Vector, x: &Vector) -> Vec<RegionLaw> {
    let terminal_active = base.gen_aset.iter().any(|&c| qp.rows[c].kind == RowKind::Terminal);
    let mut laws = vec![base];
    if terminal_active {
        return laws;
    }
    let m = qp.m;
    let mut xi = x.clone();
    for i in 1..=qp.horizon {
        let ui = u_star.rows((i - 1) * m, m);
        xi = &qp.a * &xi + &qp.b * ui;
        let shifted: Vec<usize> = laws[0]
            .gen_aset
            .iter()
            .filter_map(|&c| {
                let info = qp.rows[c];
                if info.stage < i {
                    return None;
                }
                let moved = qp.row_index(RowInfo { stage: info.stage - i, ..info })?;
                (!qp.param_only[moved]).then_some(moved)
            })
            .collect();
        let Ok(law) = RegionLaw::from_active_set(qp, &shifted) else {
            break;
        };
        let tol = RegionLaw::tol_at(SEQUENCE_TOL, &xi);
        if !law.contains_tol(&xi, tol) {
            break;
        }
        laws.push(law);
    }
    laws
}

/// Evaluating side of a controller, plus the monolithic step.
#[derive(Debug, Clone)]
pub struct Controller {
    pub strategy: Strategy,
    pub opts: StrategyOptions,
    q_cost: Mat,
    r_cost: Mat,
    /// Laws from the most recent solve (`basic`, `common`, `asu`).
    cache: Vec<RegionLaw>,
    /// Remaining closed-loop sequence (`closeq`); the last entry stays.
    queue: VecDeque<RegionLaw>,
    extended: Option<ExtendedRegion>,
    carried_bound: f64,
    prev_x: Option<Vector>,
    prev_u: Option<Vector>,
}

impl Controller {
    pub fn new(spec: &MpcSpec, strategy: Strategy, opts: StrategyOptions) -> Self {
        Self {
            strategy,
            opts,
            q_cost: spec.q.clone(),
            r_cost: spec.r.clone(),
            cache: Vec::new(),
            queue: VecDeque::new(),
            extended: None,
            carried_bound: f64::INFINITY,
            prev_x: None,
            prev_u: None,
        }
    }

    pub fn laws_in_cache(&self) -> usize {
        self.cache.len() + self.queue.len() + usize::from(self.extended.is_some())
    }

    fn stage_cost(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.q_cost * x)) + u.dot(&(&self.r_cost * u))
    }

    fn record(&mut self, x: &Vector, u: &Vector) {
        self.prev_x = Some(x.clone());
        self.prev_u = Some(u.clone());
    }

    /// Tries to serve `x` from cached laws without a QP.
    pub fn try_reuse(&mut self, qp: &QpData, x: &Vector) -> Option<StepOutcome> {
        let (u, payload) = match self.strategy {
            Strategy::Basic | Strategy::Common => {
                let law = self.cache.iter().find(|l| l.contains(x))?;
                (law.input(x), Vec::new())
            }
            Strategy::Asu => self.line_walk(qp, x)?,
            Strategy::Closeq => {
                if self.queue.len() > 1 {
                    self.queue.pop_front();
                }
                let head = self.queue.front()?;
                if !head.contains(x) {
                    self.queue.clear();
                    return None;
                }
                (head.input(x), Vec::new())
            }
            Strategy::Nlregion => {
                let er = self.extended.as_ref()?;
                let (px, pu) = (self.prev_x.as_ref()?, self.prev_u.as_ref()?);
                let prev_cost = self.stage_cost(px, pu);
                if !er.contains(x, self.carried_bound, prev_cost) {
                    return None;
                }
                self.carried_bound -= prev_cost;
                (er.base.input(x), Vec::new())
            }
        };
        self.record(x, &u);
        Some(StepOutcome {
            u,
            reused: true,
            qp_solved: false,
            laws_in_cache: self.laws_in_cache(),
            aset_payload: payload,
        })
    }

    /// Follows the segment from the previous state to `x` through
    /// neighboring regions, updating the active set at each crossed facet.
    fn line_walk(&mut self, qp: &QpData, x: &Vector) -> Option<(Vector, Vec<Vec<usize>>)> {
        let mut law = self.cache.first()?.clone();
        if law.contains(x) {
            return Some((law.input(x), Vec::new()));
        }
        let mut from = self.prev_x.clone()?;
        let mut payload = Vec::new();
        for _ in 0..MAX_LINE_UPDATES {
            let (t, rows) = match law.crossed_facet(&from, x).ok()? {
                Crossing::Inside => {
                    let u = law.input(x);
                    self.cache = vec![law];
                    return Some((u, payload));
                }
                Crossing::Exit { t, rows } => (t, rows),
            };
            if rows.len() != 1 {
                return None;
            }
            let mut next = law.gen_aset.clone();
            match law.row_meaning[rows[0]] {
                RowMeaning::Primal(c) => {
                    if qp.param_only[c] {
                        return None;
                    }
                    next.push(c);
                    next.sort_unstable();
                }
                RowMeaning::Dual(c) => next.retain(|&a| a != c),
            }
            let point = &from + (x - &from) * t;
            let updated = RegionLaw::from_active_set(qp, &next).ok()?;
            let lam = updated.multipliers(&point);
            let scale = 1.0 + lam.amax();
            if lam.iter().filter(|&&l| l / scale <= WEAK_TOL).count() > 1 {
                return None;
            }
            payload.push(next);
            law = updated;
            from = point;
        }
        None
    }

    /// Installs a plan received after a solve at `x` and returns the step.
    pub fn install(&mut self, qp: &QpData, x: &Vector, plan: Plan) -> StepOutcome {
        self.cache.clear();
        self.queue.clear();
        self.extended = None;
        let u = match &plan.status {
            PlanStatus::LicqFail { u } => u.clone(),
            PlanStatus::Ok => {
                let laws = if plan.laws.len() == plan.sets.len() {
                    plan.laws
                } else {
                    plan.sets.iter().filter_map(|s| RegionLaw::from_active_set(qp, s).ok()).collect()
                };
                let u = laws[0].input(x);
                match self.strategy {
                    Strategy::Basic | Strategy::Common | Strategy::Asu => self.cache = laws,
                    Strategy::Closeq => self.queue = laws.into(),
                    Strategy::Nlregion => {
                        let law = laws.into_iter().next().expect("one law");
                        let er = ExtendedRegion::new(qp, law, x);
                        self.carried_bound = er.anchor_cost;
                        self.extended = Some(er);
                    }
                }
                u
            }
        };
        self.record(x, &u);
        StepOutcome {
            u,
            reused: false,
            qp_solved: true,
            laws_in_cache: self.laws_in_cache(),
            aset_payload: plan.sets,
        }
    }

    /// One monolithic controller step.
    pub fn step(&mut self, qp: &QpData, x: &Vector) -> Result<StepOutcome, QpError> {
        if let Some(out) = self.try_reuse(qp, x) {
            return Ok(out);
        }
        let p = plan(qp, self.strategy, &self.opts, x)?;
        Ok(self.install(qp, x, p))
    }
}

/// Fraction of reused steps among `1..=terminal_entry_step`; `None` when
/// the trajectory starts in the terminal set.
pub fn reuse_stats(outcomes: &[StepOutcome], terminal_entry_step: usize) -> Option<f64> {
    if terminal_entry_step == 0 {
        return None;
    }
    let window = outcomes.iter().skip(1).take(terminal_entry_step);
    let reused = window.filter(|o| o.reused).count();
    Some(reused as f64 / terminal_entry_step as f64)
}

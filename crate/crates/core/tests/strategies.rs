mod common;

use common::*;
use rmpc_core::catalog::{load_system, System};
use rmpc_core::qp::{self, solve_qp};
use rmpc_core::regions::RegionLaw;
use rmpc_core::simulator::{default_max_steps, rollout, Trajectory};
use rmpc_core::strategies::{plan, reuse_stats, Controller, StepOutcome, Strategy, StrategyOptions};
use rmpc_core::Vector;

fn starts(sys: &System, count: usize, seed: u64) -> Vec<Vector> {
    let bx = sys.box_constraints();
    feasible_states(&sys.qp, &bx.x_lo, &bx.x_hi, count, seed)
}

fn run(sys: &System, strategy: Strategy, opts: StrategyOptions, x0: &Vector) -> Trajectory {
    rollout(&sys.spec, &sys.qp, strategy, opts, x0, 1e-3, default_max_steps(&sys.spec)).unwrap()
}

fn outcome(u: f64, reused: bool) -> StepOutcome {
    StepOutcome {
        u: Vector::from_element(1, u),
        reused,
        qp_solved: !reused,
        laws_in_cache: 1,
        aset_payload: Vec::new(),
    }
}

#[test]
fn reuse_fraction_definition() {
    let all: Vec<_> = (0..25).map(|k| outcome(0.0, k > 0)).collect();
    assert_eq!(reuse_stats(&all, 20), Some(1.0));
    let none: Vec<_> = (0..25).map(|_| outcome(0.0, false)).collect();
    assert_eq!(reuse_stats(&none, 20), Some(0.0));
    let half: Vec<_> = (0..12).map(|k| outcome(0.0, k % 2 == 0 && k > 0)).collect();
    assert_eq!(reuse_stats(&half, 10), Some(0.5));
    assert_eq!(reuse_stats(&all, 0), None);
}

#[test]
fn basic_solves_at_origin_then_reuses() {
    let sys = load_system("DI6").unwrap();
    let qp = &sys.qp;
    let mut ctrl = Controller::new(&sys.spec, Strategy::Basic, StrategyOptions::default());
    let out = ctrl.step(qp, &Vector::zeros(qp.n)).unwrap();
    assert!(out.qp_solved && !out.reused);
    assert_eq!(out.u.amax(), 0.0);
    assert_eq!(out.aset_payload, vec![Vec::<usize>::new()]);
    assert_eq!(ctrl.laws_in_cache(), 1);

    let x = Vector::from_vec(vec![0.05, -0.02]);
    let out = ctrl.step(qp, &x).unwrap();
    assert!(out.reused && !out.qp_solved);
    let oracle = solve_qp(qp, &x).unwrap().first_input(qp.m);
    assert!(max_abs_diff(&out.u, &oracle) <= 1e-7);
}

#[test]
fn every_strategy_applies_the_optimal_input() {
    for name in ["SISO20", "BP10", "DI6", "US12"] {
        let sys = load_system(name).unwrap();
        let qp = &sys.qp;
        for x0 in starts(&sys, 6, 31) {
            let reference = run(&sys, Strategy::Basic, StrategyOptions::default(), &x0);
            for strategy in Strategy::ALL {
                let tr = run(&sys, strategy, StrategyOptions::default(), &x0);
                assert_eq!(tr.states.len(), reference.states.len(), "{name} {strategy}");
                for (k, (x, u)) in tr.states.iter().zip(&tr.inputs).enumerate() {
                    let sol = solve_qp(qp, x).unwrap();
                    assert!(max_abs_diff(u, &sol.first_input(qp.m)) <= 1e-6, "{name} {strategy} step {k}");
                    let next = qp::value(qp, &tr.states[k + 1]).unwrap();
                    assert!(next <= sol.objective - sys.spec.stage_cost(x, u) + 1e-6, "{name} {strategy}: value increased");
                }
                for o in &tr.outcomes[1..] {
                    assert!(o.reused != o.qp_solved);
                }
            }
        }
    }
}

#[test]
fn common_with_limit_one_is_basic() {
    for name in ["SISO20", "BP10", "US12"] {
        let sys = load_system(name).unwrap();
        for x0 in starts(&sys, 8, 37) {
            let a = run(&sys, Strategy::Basic, StrategyOptions::default(), &x0);
            let b = run(&sys, Strategy::Common, StrategyOptions { limit: 1 }, &x0);
            let flags = |t: &Trajectory| t.outcomes.iter().map(|o| o.reused).collect::<Vec<_>>();
            assert_eq!(flags(&a), flags(&b), "{name}");
            assert_eq!(a.states, b.states);
        }
    }
}

#[test]
fn common_exploration_finds_every_matching_neighbor() {
    for name in ["DI6", "SISO20", "US12", "BP10"] {
        let sys = load_system(name).unwrap();
        let qp = &sys.qp;
        let opts = StrategyOptions { limit: 10_000 };
        let mut found = 0;
        for x in starts(&sys, 15, 59) {
            let sol = solve_qp(qp, &x).unwrap();
            let Ok(base) = RegionLaw::from_active_set(qp, &sol.active) else { continue };
            let p = plan(qp, Strategy::Common, &opts, &x).unwrap();
            assert_eq!(p.sets[0], sol.active);
            let same = |law: &RegionLaw| {
                (law.k_star() - base.k_star()).amax() <= 1e-9 && (law.b_star() - base.b_star()).amax() <= 1e-9
            };
            for set in &p.sets {
                assert!(same(&RegionLaw::from_active_set(qp, set).unwrap()), "{name}: explored law differs");
            }
            // Brute force over every single-constraint toggle.
            for c in (0..qp.q()).filter(|&c| !qp.param_only[c]) {
                let mut toggled: Vec<usize> = sol.active.iter().copied().filter(|&a| a != c).collect();
                if toggled.len() == sol.active.len() {
                    toggled.push(c);
                    toggled.sort_unstable();
                }
                if let Ok(law) = RegionLaw::from_active_set(qp, &toggled) {
                    if same(&law) {
                        assert!(p.sets.contains(&toggled), "{name}: neighbor {toggled:?} missed");
                        found += 1;
                    }
                }
            }
        }
        assert!(found > 0 || name == "DI6", "{name}: no shared-law neighbors at all");
    }
}

#[test]
fn asu_line_updates_reach_the_solver_active_set() {
    for name in ["SISO20", "BP10", "US12"] {
        let sys = load_system(name).unwrap();
        let qp = &sys.qp;
        let mut updates = 0;
        for x0 in starts(&sys, 8, 43) {
            let tr = run(&sys, Strategy::Asu, StrategyOptions::default(), &x0);
            for (x, o) in tr.states.iter().zip(&tr.outcomes) {
                if !o.reused {
                    continue;
                }
                let sol = solve_qp(qp, x).unwrap();
                assert!(max_abs_diff(&o.u, &sol.first_input(qp.m)) <= 1e-7, "{name}");
                let Some(last) = o.aset_payload.last() else { continue };
                updates += 1;
                let law = RegionLaw::from_active_set(qp, last).unwrap();
                if law.normalized_slacks(x).min() > 1e-6 {
                    assert_eq!(&sol.active, last, "{name}: line walk ended in a different region");
                }
            }
        }
        assert!(updates > 0, "{name}: no line updates exercised");
    }
}

#[test]
fn closeq_serves_whole_loop_from_one_solve() {
    let sys = load_system("SISO20").unwrap();
    let qp = &sys.qp;
    let terminal: Vec<usize> = (0..qp.q()).filter(|&i| qp.rows[i].kind == rmpc_core::model::RowKind::Terminal).collect();
    let mut whole = 0;
    for x0 in starts(&sys, 20, 47) {
        let first = solve_qp(qp, &x0).unwrap();
        if first.active.iter().any(|c| terminal.contains(c)) {
            continue;
        }
        let tr = run(&sys, Strategy::Closeq, StrategyOptions::default(), &x0);
        for (x, o) in tr.states.iter().zip(&tr.outcomes) {
            let oracle = solve_qp(qp, x).unwrap().first_input(qp.m);
            assert!(max_abs_diff(&o.u, &oracle) <= 1e-7);
        }
        let solves = tr.outcomes.iter().take(tr.terminal_entry_step + 1).filter(|o| o.qp_solved).count();
        assert_eq!(solves, 1, "queued sequence broke before the terminal set");
        assert_eq!(tr.outcomes[0].aset_payload[0], first.active);
        whole += 1;
    }
    assert!(whole > 0);
}

#[test]
fn closeq_queue_from_origin_repeats_empty_set() {
    let sys = load_system("DI6").unwrap();
    let qp = &sys.qp;
    let x = Vector::from_vec(vec![0.01, 0.01]);
    let p = plan(qp, Strategy::Closeq, &StrategyOptions::default(), &x).unwrap();
    assert_eq!(p.sets.len(), qp.horizon + 1);
    assert!(p.sets.iter().all(|s| s.is_empty()));
}

#[test]
fn nlregion_reuses_wherever_basic_does() {
    for name in ["SISO20", "DI6", "US12"] {
        let sys = load_system(name).unwrap();
        for x0 in starts(&sys, 8, 53) {
            let a = run(&sys, Strategy::Basic, StrategyOptions::default(), &x0);
            let b = run(&sys, Strategy::Nlregion, StrategyOptions::default(), &x0);
            assert_eq!(a.states.len(), b.states.len());
            // Compare only while both hold the law of the same solve.
            let (mut anchor_a, mut anchor_b) = (0, 0);
            for (k, (oa, ob)) in a.outcomes.iter().zip(&b.outcomes).enumerate() {
                if anchor_a == anchor_b && oa.reused {
                    assert!(ob.reused, "{name}: basic reused where nlregion solved");
                }
                if oa.qp_solved {
                    anchor_a = k;
                }
                if ob.qp_solved {
                    anchor_b = k;
                }
            }
        }
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        assert_eq!(Strategy::from_tag(s.tag()), Some(s));
    }
    assert!("lqr".parse::<Strategy>().is_err());
}

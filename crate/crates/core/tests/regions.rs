mod common;

use common::*;
use rmpc_core::catalog::load_system;
use rmpc_core::qp::{self, solve_qp};
use rmpc_core::regions::{Crossing, ExtendedRegion, RegionError, RegionLaw, RowMeaning};
use rmpc_core::simulator::{default_max_steps, rollout};
use rmpc_core::strategies::{Strategy, StrategyOptions};
use rmpc_core::Vector;

#[test]
fn empty_active_set_gives_unconstrained_law() {
    for name in ["SISO20", "BP10", "DI6", "US12", "AM4"] {
        let sys = load_system(name).unwrap();
        let qp = &sys.qp;
        let law = RegionLaw::from_active_set(qp, &[]).unwrap();
        assert!((&law.kbar + &qp.hinv_ft).amax() <= 1e-12, "{name}");
        assert_eq!(law.bbar.amax(), 0.0);
        assert_eq!(law.rows(), qp.q());
        assert!((&law.t_mat + &qp.s).amax() <= 1e-12);
        assert_eq!(law.d_vec, qp.w);
        assert!(law.row_meaning.iter().enumerate().all(|(i, &r)| r == RowMeaning::Primal(i)));
        assert!(law.contains(&Vector::zeros(qp.n)), "{name}: origin");
    }
}

#[test]
fn di6_law_matches_solver_inside_its_polytope() {
    let sys = load_system("DI6").unwrap();
    let qp = &sys.qp;
    let bx = sys.box_constraints();
    let mut checked = 0;
    for (k, x) in feasible_states(qp, &bx.x_lo, &bx.x_hi, 30, 3).into_iter().enumerate() {
        let sol = solve_qp(qp, &x).unwrap();
        let law = match RegionLaw::from_active_set(qp, &sol.active) {
            Ok(law) => law,
            Err(RegionError::LicqViolation) => continue,
            Err(e) => panic!("{e}"),
        };
        assert!(max_abs_diff(&law.sequence(&x), &sol.u_star) <= 1e-8);
        assert!(law.slacks(&x).min() >= -1e-8, "anchor outside its region");
        assert!(law.contains(&x));

        let ga = rmpc_core::linalg::select_rows(&qp.g, &law.gen_aset);
        let ea = rmpc_core::linalg::select_rows(&qp.e, &law.gen_aset);
        let wa = Vector::from_iterator(law.gen_aset.len(), law.gen_aset.iter().map(|&i| qp.w[i]));
        for y in points_in_polytope(&law.t_mat, &law.d_vec, &x, 100, 1.0, 100 + k as u64) {
            let u = law.sequence(&y);
            let oracle = solve_qp(qp, &y).unwrap();
            assert!(max_abs_diff(&oracle.u_star, &u) <= 1e-7, "Lemma 1 fails at {y:?}");
            let residual = &ga * &u - &wa - &ea * &y;
            assert!(residual.amax() <= 1e-8);
            assert!(law.multipliers(&y).min() >= -1e-8 * (1.0 + law.multipliers(&y).amax()));
            if law.normalized_slacks(&y).min() > 1e-6 {
                assert_eq!(oracle.active, law.gen_aset, "active set differs strictly inside");
            }
        }
        checked += 1;
    }
    assert!(checked >= 20);
}

/// Rows binding at the solver's optimum, with a tolerance far below the
/// solver's own so that the flip is located by geometry, not by threshold.
fn strict_active_set(qp: &rmpc_core::QpData, x: &Vector) -> Vec<usize> {
    let sol = solve_qp(qp, x).unwrap();
    let rhs = qp.rhs(x);
    let slack = &rhs - &qp.g * &sol.u_star;
    let tol = 1e-12 * (1.0 + rhs.amax());
    (0..qp.q()).filter(|&i| !qp.param_only[i] && slack[i] <= tol).collect()
}

/// First parameter where `pred` turns false on `[0, 1]`, by bisection.
fn bisect_flip(mut pred: impl FnMut(f64) -> bool) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn region_exit_matches_solver_active_set_flip() {
    for name in ["DI6", "SISO20", "US12"] {
        let sys = load_system(name).unwrap();
        let qp = &sys.qp;
        let bx = sys.box_constraints();
        let mut exits = 0;
        for x_far in feasible_states(qp, &bx.x_lo, &bx.x_hi, 25, 17) {
            let x_near = &x_far * 1e-3;
            let anchor = solve_qp(qp, &x_near).unwrap();
            let law = RegionLaw::from_active_set(qp, &anchor.active).unwrap();
            let Crossing::Exit { t, .. } = law.crossed_facet(&x_near, &x_far).unwrap() else {
                assert_eq!(solve_qp(qp, &x_far).unwrap().active, law.gen_aset);
                continue;
            };
            let at = |s: f64| &x_near + (&x_far - &x_near) * s;
            let flip = bisect_flip(|s| strict_active_set(qp, &at(s)) == law.gen_aset);
            assert!((flip - t).abs() <= 1e-6, "{name}: solver flips at {flip}, facet at {t}");
            assert!(law.contains(&at(t - 1e-4)));
            assert!(!law.contains(&at((t + 1e-4).min(1.0))));
            exits += 1;
        }
        assert!(exits > 0, "{name}: no ray left the origin region");
    }
}

#[test]
fn zero_length_segment_stays_inside() {
    let sys = load_system("SISO20").unwrap();
    let law = RegionLaw::from_active_set(&sys.qp, &[]).unwrap();
    let x = Vector::from_vec(vec![0.01, -0.02]);
    assert_eq!(law.crossed_facet(&x, &x).unwrap(), Crossing::Inside);
    let outside = &sys.box_constraints().x_hi * 3.0;
    assert!(matches!(law.crossed_facet(&outside, &x), Err(RegionError::OutsideRegion)));
}

#[test]
fn siso20_single_facet_crossings_toggle_one_constraint() {
    let sys = load_system("SISO20").unwrap();
    let qp = &sys.qp;
    let bx = sys.box_constraints();
    let opts = StrategyOptions::default();
    let mut single = 0;
    for x0 in feasible_states(qp, &bx.x_lo, &bx.x_hi, 15, 23) {
        let tr = rollout(&sys.spec, qp, Strategy::Basic, opts, &x0, 1e-3, default_max_steps(&sys.spec)).unwrap();
        for pair in tr.states.windows(2) {
            let from = solve_qp(qp, &pair[0]).unwrap();
            let Ok(law) = RegionLaw::from_active_set(qp, &from.active) else { continue };
            let Crossing::Exit { rows, .. } = law.crossed_facet(&pair[0], &pair[1]).unwrap() else { continue };
            if rows.len() != 1 {
                continue;
            }
            let to = solve_qp(qp, &pair[1]).unwrap();
            let changed: Vec<usize> = from
                .active
                .iter()
                .filter(|c| !to.active.contains(c))
                .chain(to.active.iter().filter(|c| !from.active.contains(c)))
                .copied()
                .collect();
            if changed.len() != 1 {
                // The step went on through further regions.
                continue;
            }
            let expected = match law.row_meaning[rows[0]] {
                RowMeaning::Primal(c) | RowMeaning::Dual(c) => c,
            };
            assert_eq!(changed, vec![expected]);
            single += 1;
        }
    }
    assert!(single >= 10, "only {single} single-facet crossings observed");
}

#[test]
fn extended_region_bounds_the_value_function() {
    for name in ["DI6", "SISO20", "US12", "AM4"] {
        let sys = load_system(name).unwrap();
        let qp = &sys.qp;
        let mut sampler = rmpc_core::simulator::StateSampler::new(qp, sys.box_constraints(), 41, Default::default()).unwrap();
        let anchors = sampler.take(qp, 10).unwrap();
        let probes = sampler.take(qp, 100).unwrap();
        for (k, x) in anchors.iter().enumerate() {
            let sol = solve_qp(qp, x).unwrap();
            let Ok(law) = RegionLaw::from_active_set(qp, &sol.active) else { continue };
            let er = ExtendedRegion::new(qp, law.clone(), x);
            assert!((er.anchor_cost - sol.objective).abs() <= 1e-8 * (1.0 + sol.objective.abs()));
            assert!(er.contains(x, er.anchor_cost, 0.0), "{name}: anchor rejected");
            for y in points_in_polytope(&law.t_mat, &law.d_vec, x, 10, 0.999, 7 + k as u64) {
                assert!(er.is_feasible(&y), "{name}: P* not inside the feasibility polytope");
                let v = qp::value(qp, &y).unwrap();
                assert!((er.frozen_cost(&y) - v).abs() <= 1e-7 * (1.0 + v.abs()), "{name}: Ĵ != V* inside P*");
            }
            for y in probes.iter().filter(|y| er.is_feasible(y)) {
                let v = qp::value(qp, y).unwrap();
                assert!(er.frozen_cost(y) >= v - 1e-8 * (1.0 + v.abs()), "{name}: frozen cost below optimum");
            }
            let far = &sys.box_constraints().x_hi * 10.0;
            assert!(!er.contains(&far, f64::INFINITY, 0.0));
        }
    }
}

#[test]
fn extended_region_first_reuse_on_di6_loop() {
    let sys = load_system("DI6").unwrap();
    let qp = &sys.qp;
    let bx = sys.box_constraints();
    for x0 in feasible_states(qp, &bx.x_lo, &bx.x_hi, 20, 29) {
        let sol = solve_qp(qp, &x0).unwrap();
        let Ok(law) = RegionLaw::from_active_set(qp, &sol.active) else { continue };
        let er = ExtendedRegion::new(qp, law.clone(), &x0);
        let u0 = law.input(&x0);
        let x1 = sys.spec.system.step(&x0, &u0);
        if !law.contains(&x1) {
            continue;
        }
        let stage = sys.spec.stage_cost(&x0, &u0);
        assert!(er.contains(&x1, er.anchor_cost, stage));
        // A bound already spent rejects the state, and a fresh solve restores it.
        let spent = er.frozen_cost(&x1) - 1.0;
        assert!(!er.contains(&x1, spent, 0.0));
        assert!(qp::value(qp, &x1).unwrap() <= er.anchor_cost);
    }
}

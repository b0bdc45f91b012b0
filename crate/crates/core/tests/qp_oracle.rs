mod common;

use common::*;
use rmpc_core::catalog::load_system;
use rmpc_core::qp::{self, kkt_residuals, solve_qp, QpError};
use rmpc_core::Vector;

#[test]
fn origin_has_empty_active_set() {
    for name in ["DI6", "US12", "SISO20", "AM4"] {
        let sys = load_system(name).unwrap();
        let sol = solve_qp(&sys.qp, &Vector::zeros(sys.qp.n)).unwrap();
        assert!(sol.active.is_empty(), "{name}");
        assert!(sol.u_star.amax() == 0.0);
        assert!(sol.objective.abs() < 1e-14);
    }
}

#[test]
fn di6_matches_full_enumeration() {
    let sys = load_system("DI6").unwrap();
    let bx = sys.box_constraints();
    let pool = all_rows(&sys.qp);
    for x in feasible_states(&sys.qp, &bx.x_lo, &bx.x_hi, 40, 11) {
        let sol = solve_qp(&sys.qp, &x).unwrap();
        let oracle = enumerate_active_sets(&sys.qp, &x, &pool, sys.qp.nv()).expect("enumeration finds the optimum");
        assert!(max_abs_diff(&sol.u_star, &oracle.u) <= 1e-8, "x = {x:?}");
        assert!((sol.objective - oracle.objective).abs() <= 1e-8 * (1.0 + oracle.objective.abs()));
        assert!(kkt_residuals(&sys.qp, &x, &sol).max() <= 1e-8);
    }
}

#[test]
fn infeasible_outside_state_box() {
    let sys = load_system("DI6").unwrap();
    let x = &sys.box_constraints().x_hi * 2.0;
    assert!(!qp::is_feasible(&sys.qp, &x));
    assert_eq!(solve_qp(&sys.qp, &x).unwrap_err(), QpError::Infeasible);
}

#[test]
fn licq_edge_cases() {
    let sys = load_system("DI6").unwrap();
    assert!(qp::check_licq(&sys.qp, &[]));
    // Upper and lower bound of the first input.
    assert!(!qp::check_licq(&sys.qp, &[0, 1]));
    assert!(!qp::check_licq(&sys.qp, &[0, 2, 6, 8, 12, 14, 18]));
    assert!(qp::check_licq(&sys.qp, &[0]));
}

#[test]
fn feasibility_agrees_with_phase_one_lp() {
    use rand::{Rng, SeedableRng};
    for (name, draws) in [("SISO20", 1000), ("DI6", 1000), ("US12", 500)] {
        let sys = load_system(name).unwrap();
        let bx = sys.box_constraints();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut disagree = 0;
        for _ in 0..draws {
            let x = Vector::from_fn(sys.qp.n, |i, _| rng.random_range(bx.x_lo[i]..bx.x_hi[i]));
            let viol = qp::max_violation_lp(&sys.qp, &x).unwrap();
            // Skip the measure-zero band where the LP tolerance decides.
            if viol > 0.0 && viol < 1e-7 {
                continue;
            }
            if qp::is_feasible(&sys.qp, &x) != (viol == 0.0) {
                disagree += 1;
            }
        }
        assert_eq!(disagree, 0, "{name}");
    }
}

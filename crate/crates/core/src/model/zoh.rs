use super::{ContinuousSystem, DiscreteSystem, ModelError, Result};
use crate::linalg::{self, Mat};

/// Zero-order-hold discretization.
///
/// `exp([[A, B], [0, 0]] Ts)` holds `exp(A Ts)` in its top-left block and
/// `int_0^Ts exp(A t) dt B` in its top-right block.
pub fn discretize_zoh(cs: &ContinuousSystem, ts: f64) -> Result<DiscreteSystem> {
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(ModelError::Validation(format!("sampling time must be positive, got {ts}")));
    }
    let n = cs.n();
    let m = cs.m();
    let mut aug = Mat::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&cs.a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(&cs.b * ts));
    if !linalg::all_finite(&aug) {
        return Err(ModelError::NumericOverflow);
    }
    let e = aug.exp();
    if !linalg::all_finite(&e) {
        return Err(ModelError::NumericOverflow);
    }
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, m)).into_owned();
    DiscreteSystem::new(a, b, ts)
}

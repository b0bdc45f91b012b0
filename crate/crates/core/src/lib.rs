//! Regional model predictive control.
//!
//! The condensed MPC quadratic program is solved only when needed; in between,
//! the affine feedback law that is optimal on the polytope around the last
//! solution is reused.

pub mod catalog;
pub mod experiment;
pub mod linalg;
pub mod lp;
pub mod model;
pub mod netmpc;
pub mod qp;
pub mod regions;
pub mod simulator;
pub mod strategies;

pub use linalg::{Mat, Vector};
pub use model::{
    condense, BoxConstraints, ContinuousSystem, DiscreteSystem, MpcSpec, Polytope, QpData, RowInfo, RowKind,
};

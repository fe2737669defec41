//! Feedback policies driven by the joint state/parameter estimate.

pub mod lookup;
pub mod mpc;

pub use lookup::{
    build_table, hysteresis_delta, lookup_select, lookup_step, optimal_steady_dilution,
    HysteresisConfig, ParamRanges, PolicyEntry, PolicyTable, TableError,
};
pub use mpc::{delta_patterns, mpc_solve, mpc_solve_with_patterns, MpcConfig, MpcSolution};

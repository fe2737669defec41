//! Simulation, joint state/parameter estimation, and economic control of a
//! recirculating chemostat in which extracellular DNA inhibits growth and is
//! removed by a switchable filter.

pub mod model;
pub mod control;
pub mod estimation;
pub mod harness;
pub mod observability;
pub mod identification;

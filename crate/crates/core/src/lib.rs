//! Software-in-the-loop quadrotor simulator.
//!
//! The crate couples a rigid-body NED flight model with a cascade
//! attitude/rate controller, a pluggable navigation policy producing a
//! position delta plus orientation quaternion, a mission loop with
//! intervention handling, and the metrics used to score mission logs.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dynamics;
pub mod geom;
pub mod sensors;
pub mod metrics;
pub mod mission;
pub mod policy;

//! Nonlocal transport of traffic densities on directed road networks, with
//! adjoint-based optimization of traffic-light switching schedules and a
//! co-simulation of an autonomous vehicle fleet.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod avfleet;
pub mod control;
pub mod error;
pub mod fields;
pub mod forward;
pub mod network;
pub mod optimizer;
pub mod scenario;
pub mod velocity;

pub use error::{Error, Result};

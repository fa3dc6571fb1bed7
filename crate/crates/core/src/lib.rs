//! Desk-scale phytosensor stack: single-point FRA impedance estimation, a
//! plant and tissue simulator, tiered data pipes, a detector bank, actuator
//! bindings and a rotating CSV log, tied together by a cycle runtime.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actuation;
pub mod config;
pub mod detectors;
pub mod fra;
pub mod pipeline;
pub mod runtime;
pub mod sim;
pub mod store;
pub mod types;

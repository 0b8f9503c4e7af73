#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod coupling;
pub mod estimators;
pub mod interp;
pub mod levy;
pub mod lyapunov;
pub mod model;
pub mod quad;
pub mod rng;
pub mod stats;
pub mod transport;

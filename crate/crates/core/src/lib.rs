// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numerics;
pub mod geometry;
pub mod simulator;
pub mod planes;
pub mod patchnet;
pub mod fusion;
pub mod eval;
pub mod cli;

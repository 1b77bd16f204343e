//! Simulation studies, report handling and the command-line interface for
//! the `multiway` crate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod files;
pub mod report;
pub mod sim;
pub mod study;

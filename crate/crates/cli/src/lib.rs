//! Front-end for simulating, fitting, evaluating and diagnosing PLN-PCA models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod config;
pub mod estimate;
pub mod io;

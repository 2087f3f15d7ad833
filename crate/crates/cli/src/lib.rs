#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Configuration and command pipeline for the `qkam` binary.

pub mod config;
pub mod pipeline;

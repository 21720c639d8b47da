#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod fragments;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod matching;
pub mod pipeline;
pub mod posegraph;
pub mod synthdata;

pub use error::{ReconError, Result};

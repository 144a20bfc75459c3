//! Few-step flow-matching sampling by integral velocity distillation, with a
//! coordinate-wise search for the best sampling schedule.
//!
//! A conditional flow-matching teacher is trained on a synthetic 2-D
//! distribution ([`flow`]); a dual-time student is initialized from it and
//! regressed onto the teacher's integrated displacement over random
//! intervals ([`distill`]); the student's few-step schedule is then tuned
//! by ternary search against a sliced Wasserstein metric ([`o3s`]).

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod field;
pub mod flow;
pub mod nn;
pub mod o3s;
pub mod rng;
pub mod timing;

pub use error::{Error, Result};

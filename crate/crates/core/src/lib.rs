//! Post-hoc out-of-distribution detection with adaptive top-k logit
//! integration (ATLI).
//!
//! The pipeline has two phases. Setup fits per-rank statistics, per-rank
//! signs and the effective rank set from training logits and generated
//! pseudo-OOD logits ([`calibration`], [`pseudo_ood`]). Inference scores
//! sorted test logits with those parameters ([`scores`]) and evaluates the
//! result ([`metrics`]). [`synthetic`] builds a small end-to-end benchmark
//! that needs no pretrained model.

pub mod calibration;
pub mod error;
pub mod metrics;
pub mod pseudo_ood;
mod rng;
pub mod scores;
pub mod synthetic;
pub mod tensor_io;

pub use error::{Error, Result};

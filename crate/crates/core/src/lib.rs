//! Targeted maximum likelihood estimation of the average treatment effect
//! for continuous outcomes under practical positivity violations.
//!
//! The crate provides
//!
//! * a synthetic data generator with tunable overlap ([`datagen`]),
//! * initial nuisance fits ([`nuisance`]),
//! * propensity truncation at `c / (sqrt(n) ln n)` ([`truncation`]),
//! * gH and gWt targeting with logit or linear fluctuations ([`targeting`]),
//! * EIF, plug-in and targeted-bootstrap variances ([`variance`]),
//! * a Lepski-type truncation selector with a brake envelope ([`adaptive`]),
//! * a Monte Carlo harness and the CLI plumbing around it ([`harness`],
//!   [`cli`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nuisance;
pub mod rng;
pub mod targeting;
pub mod truncation;
pub mod variance;

pub use error::{Error, Result};

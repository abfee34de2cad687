//! Causal pipeline for heterogeneous treatment-response curves under a
//! continuous treatment.
//!
//! Covariates are embedded by a balancing autoencoder trained adversarially
//! against treatment prediction, the embedded sample is augmented with
//! synthetic-twin counterfactuals, and a generalized propensity score model
//! predicts per-unit response curves. An allocation solver turns the curves
//! into a budget-constrained disbursement plan.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod bae;
pub mod baselines;
pub mod cfgen;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gps;
pub mod inference;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod quadrature;
pub mod sample;
pub mod semi_synthetic;

pub use error::{CgctError, Result, Stage};

//! Desk-scale implementation of a learnable predilection-site prior for
//! fundus/OCT/text contrastive alignment with OCT-free inference.
// `!(x >= 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod attention;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tape;
pub mod verifier;
pub mod world;

pub use error::{Error, Result, Shape};
pub use matrix::Matrix;

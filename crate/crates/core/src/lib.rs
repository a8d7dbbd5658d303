#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod judge;
pub mod beliefs;
pub mod corpus;
pub mod dynamics;
pub mod lm;
pub mod metrics;
pub mod objectives;
pub mod par;
pub mod runner;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod config;
pub mod disturbance;
pub mod drem;
pub mod error;
pub mod extension;
pub mod io;
pub mod metrics;
pub mod model;
pub mod network;
pub mod observer;
pub mod ode;
pub mod regression;
pub mod runner;
pub mod sim;

pub use error::{Error, Result};

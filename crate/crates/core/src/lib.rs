// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod harvest;
pub mod image;
pub mod io;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod seed;

pub use error::{DipsError, Result};

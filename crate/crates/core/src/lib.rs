//! Instance-anchored composed image retrieval with a learned attention bias
//! on the anchored region, plus the synthetic benchmark it is evaluated on.

pub mod benchgen;
pub mod caam;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;

pub use error::{Error, Result};

//! Heterogeneous map-entity graphs and joint contrastive pretraining of road
//! segment and land parcel representations.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod ssl;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

//! Bi-modal sentence-to-speech attention classifier with hierarchical
//! gradient-weighted relevancy interpretation.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod relevancy;
pub mod render;
pub mod sample;
pub mod train;

pub use error::{Error, Result};

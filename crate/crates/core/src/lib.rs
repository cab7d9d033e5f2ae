pub mod attack_embedding;
pub mod attack_nn;
pub mod classifiers;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod defense;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod mlc;
pub mod nn;
pub mod numeric;

pub use error::{Error, Result};

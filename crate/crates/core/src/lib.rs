//! Meta-learning with online sample reweighting.

pub mod config;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod meta;
pub mod models;
pub mod oracle;
pub mod reweight;
pub mod tasks;

pub use error::{Error, Result};

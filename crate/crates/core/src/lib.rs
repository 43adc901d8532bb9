//! Road-user importance estimation on synthetic intersection scenes.
//!
//! The pipeline has two stages. A small anchor-based proposal network finds
//! candidate road users in a top-down raster; a fusion classifier then scores
//! each candidate from its pooled appearance, its box location and a global
//! context vector taken from a network trained to predict the ego vehicle's
//! future path.

pub mod app;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod numcore;
pub mod pathnet;
pub mod proposer;
pub mod scenegen;

pub use error::{Error, Result};
pub use exec::Exec;

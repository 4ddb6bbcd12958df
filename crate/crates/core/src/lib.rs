//! Next point-of-interest recommendation from check-in histories.
//!
//! The model combines a long-term interest, pooled per weekday and attended
//! over with the candidate query, with four short-term interests encoded by
//! separate LSTMs over context-filtered check-in sequences. Everything below
//! the model, including the gradient tape, lives in this crate.

pub mod context;
pub mod error;
pub mod eval;
pub mod geodata;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

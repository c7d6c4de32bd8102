//! Desk-scale medical vision-language pretraining on a synthetic corpus.

pub mod error;
pub mod errorsim;
pub mod metrics;
pub mod seed;
pub mod synthdata;
pub mod textpipe;
pub mod model;
pub mod objectives;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};

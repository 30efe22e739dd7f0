pub mod corpus;
pub mod error;
pub mod real;
pub mod seed;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod config;
pub mod dsp;
pub mod ema;
pub mod encoder;
pub mod enhancement;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod nn;
pub mod plot;
pub mod run;
pub mod training;

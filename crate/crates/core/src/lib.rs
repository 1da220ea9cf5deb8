//! Raw-waveform acoustic modelling with a learnable sinc filterbank, and the
//! adaptation schemes built on it: cut-off adaptation, per-filter gain (LHUC)
//! scaling and their combinations.

pub mod error;
pub mod filterbank;
pub mod nnet;
pub mod optim;
pub mod data;
pub mod train;
pub mod adapt;
pub mod analysis;
pub mod checkpoint;
pub mod experiment;
pub mod pipeline;

pub use error::{Error, Result};

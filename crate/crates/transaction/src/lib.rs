//! Files, training loop and command line around `transaction-core`.

pub mod annotations;
pub mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod frequency;
pub mod report;
pub mod synthetic;
pub mod train;

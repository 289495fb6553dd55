//! Run-file loading and flag resolution for the `flatnet` binary.

pub mod config;

pub use config::{RunFile, TrainArgs};

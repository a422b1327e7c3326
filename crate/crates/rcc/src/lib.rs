//! File formats, run configuration, training pipeline and command-line
//! interface around `rcc-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;

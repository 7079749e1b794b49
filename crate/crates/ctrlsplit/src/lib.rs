//! File formats, run directories, experiment presets and the command-line
//! front end around `ctrlsplit-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod export;
pub mod formats;
pub mod manifest;
pub mod metrics;
pub mod presets;
pub mod probes;

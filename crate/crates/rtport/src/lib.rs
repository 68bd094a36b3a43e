//! rtport command-line tool: file formats, stage drivers, the pipeline
//! runner and the I/O server transports around `rtport-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod io;
pub mod ioserver;
pub mod kbfile;
pub mod pipeline;
pub mod scenario;
pub mod stages;
pub mod synth;

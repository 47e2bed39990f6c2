//! Std companion of `afkit-core`: file formats, the staged pipeline, the
//! annotation service and the command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod server;
pub mod simulate;
pub mod synth;

pub use error::{Error, Result};

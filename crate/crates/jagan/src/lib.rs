//! File formats, PNG I/O and the command line around [`jagan_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod logging;
pub mod manifest;
pub mod sidecar;

pub use error::{Error, Result};

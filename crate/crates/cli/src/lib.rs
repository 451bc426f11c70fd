//! Command-line front end for the drift monitor: file formats, configuration
//! loading, and the `gen` / `monitor` / `eval` / `demo-pitfall` commands as
//! callable functions.

pub mod commands;
pub mod formats;

//! Command implementations behind the `svs` binary and the render service.

pub mod commands;
pub mod server;

pub use commands::*;

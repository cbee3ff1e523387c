//! The `fedforge` command line and the HTTP API served to the console.

pub mod api;
pub mod cli;

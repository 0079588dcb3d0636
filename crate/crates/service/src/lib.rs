//! HTTP API and command-line front end over `crowdlab-core`.

pub mod api;
pub mod cli;
pub mod error;
pub mod files;
pub mod ops;

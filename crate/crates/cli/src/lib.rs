//! Command line and HTTP front end over `layoutdiff-core`.

pub mod cli;
pub mod config;
pub mod server;

//! Command-line driver and HTTP server for the embedding language model.

pub mod cli;
pub mod server;

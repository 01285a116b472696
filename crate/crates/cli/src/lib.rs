//! Command-line tools and the HTTP inference service.

pub mod cli;
pub mod predict;
pub mod server;

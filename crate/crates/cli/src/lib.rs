//! Command-line front end and HTTP service for the layout model.

pub mod commands;
pub mod server;

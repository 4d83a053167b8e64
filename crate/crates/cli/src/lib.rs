//! The `seam` command line and HTTP API.

pub mod api;
pub mod commands;
pub mod config;
pub mod error;
pub mod live;
pub mod service;

pub use commands::run;

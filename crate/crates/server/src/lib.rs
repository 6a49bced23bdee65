//! HTTP front end and command-line tools for the learnlog service.

pub mod app;
pub mod config;
pub mod http;
pub mod loadgen_http;

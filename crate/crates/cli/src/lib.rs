//! Command-line pipelines and the local render service.

pub mod commands;
pub mod request;
pub mod service;

//! Command-line pipeline and annotation service for krill board photographs.

pub mod cli;
pub mod commands;
pub mod config;
pub mod service;
pub mod summary;
pub mod workspace;

pub use cli::{run, Cli};
pub use config::RunConfig;
pub use summary::Summary;
pub use workspace::Workspace;

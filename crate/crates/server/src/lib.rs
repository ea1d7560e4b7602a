//! HTTP service for prompt explanations.

pub mod api;
pub mod config;
pub mod http;
pub mod registry;

pub use config::ServerConfig;
pub use registry::Registry;

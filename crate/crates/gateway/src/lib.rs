//! Agent service: configuration, sessions, HTTP and control-protocol servers.

pub mod app;
pub mod config;
pub mod control;
pub mod http;
pub mod remote;
pub mod scenario;
pub mod sessions;

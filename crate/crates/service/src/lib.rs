//! HTTP service, persistence wiring and CLI for the grading platform.

pub mod api;
pub mod app;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;

pub use app::App;
pub use error::AppError;

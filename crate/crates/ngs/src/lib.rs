//! CLI and inference service for neural granular synthesis.

pub mod cli;
pub mod service;

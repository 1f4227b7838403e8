//! Library half of the `ergsyn` command: run configuration, the pipeline
//! commands, the per-run artifact manifest, and SVG figures.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

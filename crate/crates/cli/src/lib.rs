//! File formats, configuration and command implementations behind the
//! `mmfusion` binary.

pub mod commands;
pub mod config;
pub mod errors;
pub mod formats;
pub mod scenes;

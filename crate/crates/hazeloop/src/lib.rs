//! File formats, configuration and the command-line workflow around
//! `hazeloop-core`.

pub mod ckpt;
pub mod commands;
pub mod config;
pub mod error;
pub mod freeze;
pub mod image_io;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};

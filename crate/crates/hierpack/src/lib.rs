//! Files, configuration and the command line around `hierpack-core`.
//!
//! - [`features`]: `HEPF` feature files.
//! - [`labels`] and [`manifest`]: annotation tables and dataset manifests.
//! - [`checkpoint`]: `HEPK` checkpoints.
//! - [`config`]: flat `key = value` run configuration.
//! - [`commands`] and [`cli`]: the `hierpack` binary.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod features;
pub mod fsutil;
pub mod labels;
pub mod manifest;

pub use error::{Error, Result};
pub use hierpack_core as core;

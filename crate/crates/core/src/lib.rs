//! Hierarchical temporal-graph modeling of segment feature sequences, with
//! multi-task pretraining and prototype-guided transfer to novel tasks.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the `hierpack` companion crate.
//!
//! Module map:
//! - [`diffcore`]: dense fp64 tensors, a reverse-mode tape and Adam.
//! - [`tgraph`]: temporal graphs, edge thresholds and temporal pooling.
//! - [`backbone`]: temporal distance gated convolution and the stage hierarchy.
//! - [`tasks`]: necks, alignment, heads, losses, decoding and metrics.
//! - [`backpack`]: prototype sets, k-NN retrieval, interaction and fusion.
//! - [`model`] and [`train`]: stage-1 multi-task and stage-2 novel-task training.
//! - [`data`]: the seeded synthetic multi-task video generator.
//! - [`transfer`]: the rotation benchmark over novel tasks.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod backpack;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tgraph;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};

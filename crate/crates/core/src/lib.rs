//! Seeded tracing of individual vessel trees in fundus images by clustering
//! per-pixel embeddings, with the loss, clustering, temporal, metric and
//! synthetic-scene machinery around it.

pub mod cli;
pub mod cluster;
pub mod embedder;
pub mod error;
pub mod files;
pub mod loss;
pub mod metrics;
pub mod raster;
pub mod synthetic;
pub mod temporal;
pub mod trace;

pub use error::{Error, Result};

//! Embedding-MLP click model with an optional factorization-machine term and
//! the knowledge injection modes.

mod checkpoint;
mod model;

pub use checkpoint::{BACKBONE_MAGIC, BACKBONE_VERSION};
pub use model::{train_rec, BackboneConfig, Injection, RecModel, RecNet};

//! Knowledge encoder: embeddings, one Transformer block, the per-triple
//! knowledge network and a linear click head.

mod checkpoint;
mod embedding;
mod model;

pub use checkpoint::{ENCODER_MAGIC, ENCODER_VERSION};
pub use embedding::EmbeddingTable;
pub use model::{train_encoder, EncoderConfig, EncoderModel, EncoderNet};

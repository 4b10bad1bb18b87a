use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, EncoderModel};
use crate::binio::{read_checkpoint, restore_params, write_atomic, write_checkpoint};
use crate::dataio::FeatureSchema;
use crate::error::{D2kError, Result};
use crate::numeric::EpochMetrics;

pub const ENCODER_MAGIC: &[u8; 4] = b"D2KE";
pub const ENCODER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    schema: String,
    vocab_sizes: Vec<usize>,
    history: Vec<EpochMetrics>,
}

impl EncoderModel {
    /// Serializes the model. Parameters follow in creation order: embedding,
    /// attention `wq wk wv wo`, first layer norm, feed-forward layers, second
    /// layer norm, knowledge-network layers, head (weights before biases).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config,
            schema: self.schema.to_text(),
            vocab_sizes: self.vocab_sizes().to_vec(),
            history: self.history.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| D2kError::config(e.to_string()))?;
        Ok(write_checkpoint(ENCODER_MAGIC, ENCODER_VERSION, &self.schema.layout_hash(), &json, &self.params))
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let ck = read_checkpoint(data, ENCODER_MAGIC, ENCODER_VERSION)?;
        let header: Header = serde_json::from_str(&ck.config_json).map_err(|e| D2kError::format(44, format!("bad header: {e}")))?;
        let schema = FeatureSchema::parse(&header.schema)?;
        if schema.layout_hash() != ck.schema_hash {
            return Err(D2kError::format(8, "schema hash does not match the stored schema"));
        }
        let mut model = EncoderModel::new(&schema, &header.vocab_sizes, header.config)?;
        restore_params(&mut model.params, ck.tensors)?;
        model.history = header.history;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

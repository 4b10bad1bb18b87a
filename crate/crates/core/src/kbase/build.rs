use std::collections::HashSet;

use sha2::{Digest, Sha256};

use super::base::{KbMeta, KnowledgeBase, UpdatePolicy};
use super::key::{key_fields, TernaryKey};
use crate::dataio::{FeatureSchema, Sample};
use crate::encoder::EncoderModel;
use crate::error::{D2kError, Result};

/// Number of keys encoded per encoder pass.
const ENCODE_CHUNK: usize = 8192;

/// Every distinct single-value key occurring in `samples`, restricted to the
/// schema's knowledge-base fields, in ascending order. Multi-value fields are
/// split into their elements.
pub fn distinct_keys(samples: &[Sample], schema: &FeatureSchema) -> Vec<TernaryKey> {
    let triples: Vec<([usize; 3], [u16; 3])> = schema
        .query_triples()
        .into_iter()
        .map(|t| (t, key_fields(schema, t)))
        .collect();
    let mut seen = HashSet::new();
    for s in samples {
        for (t, fields) in &triples {
            for &a in s.field(t[0]) {
                for &b in s.field(t[1]) {
                    for &c in s.field(t[2]) {
                        seen.insert(TernaryKey::new(*fields, [a, b, c]));
                    }
                }
            }
        }
    }
    let mut keys: Vec<TernaryKey> = seen.into_iter().collect();
    keys.sort_unstable();
    keys
}

/// Builds a base from old data: each distinct key is encoded in isolation as
/// a three-token input to the frozen encoder.
pub fn generate_kb(samples: &[Sample], encoder: &EncoderModel, schema: &FeatureSchema) -> Result<KnowledgeBase> {
    if schema.layout_hash() != encoder.schema.layout_hash() {
        return Err(D2kError::config("encoder was trained on a different schema layout"));
    }
    for s in samples {
        s.check(schema, encoder.vocab_sizes())?;
    }
    let keys = distinct_keys(samples, schema);
    let dk = encoder.knowledge_dim();
    let mut kb = KnowledgeBase::new(dk, schema.layout_hash());
    let mut vec = vec![0f32; dk];
    for chunk in keys.chunks(ENCODE_CHUNK) {
        let triples = chunk.iter().map(|k| k.to_global(schema)).collect::<Result<Vec<_>>>()?;
        let z = encoder.encode_triples(&triples)?;
        for (i, key) in chunk.iter().enumerate() {
            for (o, &x) in vec.iter_mut().zip(z.row(i)) {
                *o = x as f32;
            }
            kb.insert(*key, &vec)?;
        }
    }
    kb.meta = KbMeta {
        encoder_checksum: Some(Sha256::digest(encoder.to_bytes()?).into()),
        source_blocks: None,
        generations: 1,
    };
    Ok(kb)
}

/// Generates knowledge from new data with a newly trained encoder and merges
/// it into `kb` under `policy`. The input base is left unchanged.
pub fn update_kb(kb: &KnowledgeBase, samples: &[Sample], encoder: &EncoderModel, schema: &FeatureSchema, policy: UpdatePolicy) -> Result<KnowledgeBase> {
    if encoder.knowledge_dim() != kb.dim() {
        return Err(D2kError::config(format!(
            "encoder width {} does not match base width {}",
            encoder.knowledge_dim(),
            kb.dim()
        )));
    }
    let fresh = generate_kb(samples, encoder, schema)?;
    kb.merged(&fresh, policy)
}

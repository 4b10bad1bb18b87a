use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::schema::{FeatureSchema, FieldKind};
use crate::error::{D2kError, Result};

/// Value ID reserved for out-of-vocabulary tokens in every field.
pub const OOV: u32 = 0;

/// One log record. `values[f]` holds the value IDs of field `f` in schema
/// order; single-value fields hold exactly one ID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub values: Vec<Vec<u32>>,
    pub label: u8,
    pub timestamp: i64,
}

impl Sample {
    pub fn new(values: Vec<Vec<u32>>, label: u8, timestamp: i64) -> Self {
        Self {
            values,
            label,
            timestamp,
        }
    }

    pub fn field(&self, idx: usize) -> &[u32] {
        &self.values[idx]
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }

    /// Checks value counts against the schema and value IDs against the
    /// per-field vocabulary sizes.
    pub fn check(&self, schema: &FeatureSchema, vocab_sizes: &[usize]) -> Result<()> {
        if self.values.len() != schema.num_fields() {
            return Err(D2kError::config(format!(
                "sample has {} fields, schema has {}",
                self.values.len(),
                schema.num_fields()
            )));
        }
        if self.label > 1 {
            return Err(D2kError::config(format!("label {} outside {{0,1}}", self.label)));
        }
        for (i, vals) in self.values.iter().enumerate() {
            let spec = schema.field(i);
            match spec.kind {
                FieldKind::Single if vals.len() != 1 => {
                    return Err(D2kError::config(format!("single-value field {} holds {} values", spec.name, vals.len())))
                }
                FieldKind::Multi if vals.is_empty() => {
                    return Err(D2kError::config(format!("multi-value field {} is empty", spec.name)))
                }
                _ => {}
            }
            if let Some(&bad) = vals.iter().find(|&&v| v as usize >= vocab_sizes[i]) {
                return Err(D2kError::config(format!(
                    "value id {bad} out of range for field {} ({} ids)",
                    spec.name, vocab_sizes[i]
                )));
            }
        }
        Ok(())
    }
}

/// Per-field token dictionaries. ID 0 is reserved for unseen tokens; real
/// tokens receive dense IDs starting at 1 in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    fields: Vec<FieldVocab>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
struct FieldVocab {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn empty(num_fields: usize) -> Self {
        Self {
            fields: (0..num_fields).map(|_| FieldVocab::default()).collect(),
        }
    }

    /// A vocabulary whose field `f` holds tokens `"1".."=sizes[f]-1"`,
    /// mapping token `"n"` to ID `n`. Used for generated data.
    pub fn numeric(sizes: &[usize]) -> Self {
        let mut v = Self::empty(sizes.len());
        for (f, &size) in sizes.iter().enumerate() {
            for n in 1..size {
                v.insert(f, &n.to_string());
            }
        }
        v
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    /// Assigns an ID to `token` if it has none yet.
    pub fn insert(&mut self, field: usize, token: &str) -> u32 {
        let fv = &mut self.fields[field];
        if let Some(&id) = fv.ids.get(token) {
            return id;
        }
        fv.tokens.push(token.to_string());
        let id = fv.tokens.len() as u32;
        fv.ids.insert(token.to_string(), id);
        id
    }

    /// ID of `token`, or [`OOV`] when unseen.
    pub fn encode(&self, field: usize, token: &str) -> u32 {
        self.fields[field].ids.get(token).copied().unwrap_or(OOV)
    }

    pub fn decode(&self, field: usize, id: u32) -> Option<&str> {
        if id == OOV {
            return None;
        }
        self.fields[field].tokens.get(id as usize - 1).map(String::as_str)
    }

    /// Number of IDs per field including the OOV slot.
    pub fn sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.tokens.len() + 1).collect()
    }
}

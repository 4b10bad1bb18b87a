use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureSchema, RawTriple, Side};
use crate::error::{D2kError, Result};

/// Knowledge-base key: one (field, value) slot per side. Field indices are
/// positions within their side of the schema. Keys order lexicographically by
/// `(fields, values)`, which is also their on-disk order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TernaryKey {
    pub fields: [u16; 3],
    pub values: [u32; 3],
}

impl TernaryKey {
    pub fn new(fields: [u16; 3], values: [u32; 3]) -> Self {
        Self { fields, values }
    }

    pub fn from_raw(raw: &RawTriple) -> Self {
        Self {
            fields: [raw[0].0, raw[1].0, raw[2].0],
            values: [raw[0].1, raw[1].1, raw[2].1],
        }
    }

    pub fn to_raw(&self) -> RawTriple {
        [
            (self.fields[0], self.values[0]),
            (self.fields[1], self.values[1]),
            (self.fields[2], self.values[2]),
        ]
    }

    /// `(global field index, value)` per slot, validated against the schema.
    pub fn to_global(&self, schema: &FeatureSchema) -> Result<[(usize, u32); 3]> {
        let mut out = [(0, 0); 3];
        for (s, side) in Side::ALL.into_iter().enumerate() {
            let g = schema.global_index(side, self.fields[s] as usize).ok_or_else(|| {
                D2kError::config(format!("key field {} has no {} field in the schema", self.fields[s], side.as_str()))
            })?;
            out[s] = (g, self.values[s]);
        }
        Ok(out)
    }
}

/// Side positions of a query triple given as global field indices.
pub fn key_fields(schema: &FeatureSchema, triple: [usize; 3]) -> [u16; 3] {
    triple.map(|g| schema.side_position(g) as u16)
}

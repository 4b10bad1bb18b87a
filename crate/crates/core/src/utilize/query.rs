use crate::dataio::{FeatureSchema, Sample};
use crate::kbase::{key_fields, TernaryKey};

/// One ternary query of a sample: the field triple and the sample's values
/// for those fields (several values for multi-value fields).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    /// Global field indices `(u, v, c)`.
    pub fields: [usize; 3],
    /// Side positions used in knowledge-base keys.
    pub key_fields: [u16; 3],
    pub values: [Vec<u32>; 3],
}

impl Query {
    /// Single-value keys in expansion order (user values outermost).
    pub fn keys(&self) -> Vec<TernaryKey> {
        let mut out = Vec::with_capacity(self.values.iter().map(Vec::len).product());
        for &a in &self.values[0] {
            for &b in &self.values[1] {
                for &c in &self.values[2] {
                    out.push(TernaryKey::new(self.key_fields, [a, b, c]));
                }
            }
        }
        out
    }
}

/// Field triples of a schema's query set, resolved once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    pub triples: Vec<[usize; 3]>,
    pub key_fields: Vec<[u16; 3]>,
}

impl QueryPlan {
    pub fn new(schema: &FeatureSchema) -> Self {
        let triples = schema.query_triples();
        let key_fields = triples.iter().map(|&t| key_fields(schema, t)).collect();
        Self { triples, key_fields }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Query set of a sample: every `(i, j, k)` combination of knowledge-base
/// fields in nested loop order.
pub fn gen_queries(sample: &Sample, schema: &FeatureSchema) -> Vec<Query> {
    let plan = QueryPlan::new(schema);
    plan.triples
        .iter()
        .zip(&plan.key_fields)
        .map(|(t, kf)| Query {
            fields: *t,
            key_fields: *kf,
            values: [sample.field(t[0]).to_vec(), sample.field(t[1]).to_vec(), sample.field(t[2]).to_vec()],
        })
        .collect()
}

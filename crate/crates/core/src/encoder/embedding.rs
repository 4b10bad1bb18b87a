use rand::Rng;

use crate::dataio::Sample;
use crate::error::{D2kError, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor2, Var};

/// Per-field embedding matrices stored as one stacked parameter; field `f`
/// owns rows `offsets[f] .. offsets[f] + vocab_sizes[f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub dim: usize,
    vocab_sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl EmbeddingTable {
    /// Adds the stacked table to `params`, initialized uniformly in
    /// `±1/sqrt(dim)`.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, name: &str, vocab_sizes: &[usize], dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || vocab_sizes.is_empty() || vocab_sizes.contains(&0) {
            return Err(D2kError::config("embedding needs a positive dimension and non-empty vocabularies"));
        }
        let mut offsets = Vec::with_capacity(vocab_sizes.len());
        let mut total = 0;
        for &v in vocab_sizes {
            offsets.push(total);
            total += v;
        }
        let param = params.add(name, Tensor2::uniform_fan_in(total, dim, dim, rng));
        Ok(Self {
            param,
            dim,
            vocab_sizes: vocab_sizes.to_vec(),
            offsets,
        })
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    /// Row of the stacked table holding `id` of field `field`.
    pub fn row_of(&self, field: usize, id: u32) -> Result<usize> {
        let size = self.vocab_sizes[field];
        if id as usize >= size {
            return Err(D2kError::Value(format!("value id {id} out of range for field {field} ({size} ids)")));
        }
        Ok(self.offsets[field] + id as usize)
    }

    /// Pooled embeddings for `fields` of every sample, as a
    /// `(samples.len() · fields.len()) × dim` node with sample-major rows.
    /// Multi-value fields are average-pooled.
    pub fn lookup(&self, tape: &mut Tape<'_>, samples: &[&Sample], fields: &[usize]) -> Result<Var> {
        let mut offsets = Vec::with_capacity(samples.len() * fields.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for s in samples {
            for &f in fields {
                let vals = s.field(f);
                if vals.is_empty() {
                    return Err(D2kError::Value(format!("field {f} has no values")));
                }
                for &id in vals {
                    indices.push(self.row_of(f, id)?);
                }
                offsets.push(indices.len());
            }
        }
        let table = tape.param(self.param);
        tape.gather_mean(table, offsets, indices)
    }

    /// Pooled embedding of each field of one sample, without a tape.
    pub fn embed_sample(&self, params: &ParamStore, sample: &Sample) -> Result<Vec<Vec<f64>>> {
        let table = params.get(self.param);
        let mut out = Vec::with_capacity(sample.values.len());
        for (f, vals) in sample.values.iter().enumerate() {
            if vals.is_empty() {
                return Err(D2kError::Value(format!("field {f} has no values")));
            }
            let mut acc = vec![0.0; self.dim];
            for &id in vals {
                let row = table.row(self.row_of(f, id)?);
                acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
            }
            let inv = 1.0 / vals.len() as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            out.push(acc);
        }
        Ok(out)
    }
}

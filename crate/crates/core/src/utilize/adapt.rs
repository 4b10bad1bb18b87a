use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2kError, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor2, Var};

/// Source of the sample embedding fed to the adaptation unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adaptation {
    /// No adaptation; global knowledge is used as is.
    None,
    /// Reuses the backbone's embedding table.
    Share,
    /// A separate table of the backbone's width.
    Sep,
    /// A separate table of a quarter of the backbone's width.
    Small,
}

impl std::str::FromStr for Adaptation {
    type Err = D2kError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "share" => Ok(Self::Share),
            "sep" => Ok(Self::Sep),
            "small" => Ok(Self::Small),
            other => Err(D2kError::config(format!("unknown adaptation {other:?}"))),
        }
    }
}

/// Personalized adaptation unit: a linear projection `w_x = w_pro · x` of the
/// sample embedding is sliced into the weights and biases of an `L`-layer
/// tanh network that is applied to each knowledge vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptationUnit {
    /// `L·d_k·(d_k+1) × input_width`
    pub w_pro: ParamId,
    pub layers: usize,
    pub knowledge_dim: usize,
    pub input_width: usize,
}

/// Rows of the projection matrix: one `d_k × d_k` weight and a `d_k` bias per
/// layer.
pub fn projection_rows(layers: usize, knowledge_dim: usize) -> usize {
    layers * knowledge_dim * (knowledge_dim + 1)
}

impl AdaptationUnit {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, name: &str, input_width: usize, layers: usize, knowledge_dim: usize, rng: &mut R) -> Result<Self> {
        if layers == 0 || knowledge_dim == 0 || input_width == 0 {
            return Err(D2kError::config("adaptation unit needs positive layers, knowledge and input widths"));
        }
        let rows = projection_rows(layers, knowledge_dim);
        let w_pro = params.add(format!("{name}.w_pro"), Tensor2::uniform_fan_in(rows, input_width, input_width, rng));
        Ok(Self {
            w_pro,
            layers,
            knowledge_dim,
            input_width,
        })
    }

    pub fn projection_rows(&self) -> usize {
        projection_rows(self.layers, self.knowledge_dim)
    }

    /// Adapts `z` (`n · per_sample × d_k`, sample-major) with the generated
    /// networks of `x` (`n × input_width`).
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var, z: Var, per_sample: usize) -> Result<Var> {
        let (xr, xc) = tape.value(x).shape();
        if xc != self.input_width {
            return Err(D2kError::config(format!(
                "adaptation input width {xc}, unit expects {}",
                self.input_width
            )));
        }
        if tape.value(z).shape() != (xr * per_sample, self.knowledge_dim) {
            return Err(D2kError::config(format!(
                "knowledge shape {:?} for {xr} samples x {per_sample} queries of width {}",
                tape.value(z).shape(),
                self.knowledge_dim
            )));
        }
        let w_pro = tape.param(self.w_pro);
        let wx = tape.matmul_bt(x, w_pro)?;
        let per_layer = self.knowledge_dim * (self.knowledge_dim + 1);
        let mut h = z;
        for l in 0..self.layers {
            let lin = tape.hyper_linear(h, wx, l * per_layer, per_sample)?;
            h = tape.tanh(lin);
        }
        Ok(h)
    }
}

/// Adapts one knowledge vector for one sample embedding, without a tape.
pub fn adapt(x_embedding: &[f64], z: &[f64], unit: &AdaptationUnit, params: &ParamStore) -> Result<Vec<f64>> {
    let w_pro = params.get(unit.w_pro);
    if x_embedding.len() != unit.input_width || z.len() != unit.knowledge_dim {
        return Err(D2kError::config(format!(
            "adapt expects input width {} and knowledge width {}, got {} and {}",
            unit.input_width,
            unit.knowledge_dim,
            x_embedding.len(),
            z.len()
        )));
    }
    let mut tape = Tape::new(params);
    let x = tape.constant(Tensor2::row_vector(x_embedding));
    let zv = tape.constant(Tensor2::row_vector(z));
    debug_assert_eq!(w_pro.rows(), unit.projection_rows());
    let out = unit.apply(&mut tape, x, zv, 1)?;
    Ok(tape.value(out).data().to_vec())
}

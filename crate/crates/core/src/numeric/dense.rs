use rand::Rng;

use super::tape::{Activation, DenseVars, ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor2;
use crate::error::Result;

/// Parameter handles of one dense layer `act(x · W + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    /// Fan-in uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, name: &str, inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let weight = params.add(format!("{name}.weight"), Tensor2::uniform_fan_in(inputs, outputs, inputs, rng));
        let bias = params.add(format!("{name}.bias"), Tensor2::zeros(1, outputs));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn vars(&self, tape: &mut Tape<'_>) -> DenseVars {
        DenseVars {
            weight: tape.param(self.weight),
            bias: tape.param(self.bias),
            activation: self.activation,
        }
    }

    pub fn inputs(&self, params: &ParamStore) -> usize {
        params.get(self.weight).rows()
    }

    pub fn outputs(&self, params: &ParamStore) -> usize {
        params.get(self.weight).cols()
    }
}

/// Applies a stack of layers.
pub fn forward_stack(tape: &mut Tape<'_>, x: Var, layers: &[Dense]) -> Result<Var> {
    let vars: Vec<DenseVars> = layers.iter().map(|l| l.vars(tape)).collect();
    tape.mlp(x, &vars)
}

use crate::error::{D2kError, Result};
use crate::numeric::sigmoid;

/// `[x_embedding, z_1, …, z_Nq]`.
pub fn inject_concat(x_embedding: &[f64], knowledge: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x_embedding.len() + knowledge.len());
    out.extend_from_slice(x_embedding);
    out.extend_from_slice(knowledge);
    out
}

/// Additive knowledge tower: `sigmoid(backbone_logit + P(knowledge))`.
pub fn inject_tower<P>(backbone_logit: f64, knowledge: &[f64], predictor: P) -> f64
where
    P: Fn(&[f64]) -> f64,
{
    sigmoid(backbone_logit + predictor(knowledge))
}

/// Linear predictor on concatenated knowledge only.
pub fn direct_predict(knowledge: &[f64], weights: &[f64], bias: f64) -> Result<f64> {
    if knowledge.len() != weights.len() {
        return Err(D2kError::config(format!(
            "{} knowledge values for {} head weights",
            knowledge.len(),
            weights.len()
        )));
    }
    Ok(sigmoid(knowledge.iter().zip(weights).map(|(k, w)| k * w).sum::<f64>() + bias))
}

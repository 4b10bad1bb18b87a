use super::query::QueryPlan;
use crate::dataio::Sample;
use crate::kbase::{KnowledgeBase, TernaryKey};
use crate::numeric::Tensor2;

/// Knowledge vectors for a batch: `vectors` has one row per (sample, query),
/// sample-major; `hits[r]` is set when every split lookup of row `r` hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedKnowledge {
    pub vectors: Tensor2,
    pub hits: Vec<bool>,
    pub num_queries: usize,
}

impl RetrievedKnowledge {
    pub fn num_samples(&self) -> usize {
        self.hits.len() / self.num_queries.max(1)
    }

    /// Fraction of queries that hit.
    pub fn hit_rate(&self) -> f64 {
        if self.hits.is_empty() {
            return 0.0;
        }
        self.hits.iter().filter(|&&h| h).count() as f64 / self.hits.len() as f64
    }

    /// Hit rate of each sample.
    pub fn sample_hit_rates(&self) -> Vec<f64> {
        self.hits
            .chunks(self.num_queries.max(1))
            .map(|c| c.iter().filter(|&&h| h).count() as f64 / c.len() as f64)
            .collect()
    }

    /// Concatenated knowledge of each sample as a `n × (N_q · d_k)` matrix.
    pub fn flattened(&self) -> Tensor2 {
        let n = self.num_samples();
        self.vectors.clone().reshaped(n, self.vectors.len() / n.max(1))
    }
}

/// Looks up every query of every sample. A query over multi-value fields is
/// the mean over its single-value expansion: the split vectors are summed in
/// expansion order and divided by their count. Missing keys contribute zeros.
pub fn retrieve(samples: &[Sample], kb: &KnowledgeBase, plan: &QueryPlan) -> RetrievedKnowledge {
    let dk = kb.dim();
    let nq = plan.len();
    let mut vectors = Tensor2::zeros(samples.len() * nq, dk);
    let mut hits = Vec::with_capacity(samples.len() * nq);
    let mut buf = vec![0.0; dk];
    for (b, s) in samples.iter().enumerate() {
        for (q, (t, kf)) in plan.triples.iter().zip(&plan.key_fields).enumerate() {
            let row = vectors.row_mut(b * nq + q);
            let (us, vs, cs) = (s.field(t[0]), s.field(t[1]), s.field(t[2]));
            let mut all_hit = true;
            if us.len() == 1 && vs.len() == 1 && cs.len() == 1 {
                all_hit = kb.lookup_into(&TernaryKey::new(*kf, [us[0], vs[0], cs[0]]), row);
            } else {
                for &a in us {
                    for &v in vs {
                        for &c in cs {
                            if kb.lookup_into(&TernaryKey::new(*kf, [a, v, c]), &mut buf) {
                                row.iter_mut().zip(&buf).for_each(|(r, x)| *r += x);
                            } else {
                                all_hit = false;
                            }
                        }
                    }
                }
                let n = (us.len() * vs.len() * cs.len()) as f64;
                row.iter_mut().for_each(|r| *r /= n);
            }
            hits.push(all_hit);
        }
    }
    RetrievedKnowledge {
        vectors,
        hits,
        num_queries: nq,
    }
}

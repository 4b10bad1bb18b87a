use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureSchema, Sample};
use crate::error::{D2kError, Result};
use crate::kbase::KnowledgeBase;
use crate::utilize::{retrieve, QueryPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBench {
    pub batch_size: usize,
    pub batches: usize,
    pub queries_per_sample: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub median_us_per_sample: f64,
    pub kb_entries: usize,
    pub kb_bytes: usize,
    pub hit_rate: f64,
}

/// Times batched retrieval. Batches cycle through `samples`; one warm-up
/// batch is discarded, then `batches` batches are timed.
pub fn bench_retrieval(kb: &KnowledgeBase, samples: &[Sample], schema: &FeatureSchema, batch_size: usize, batches: usize) -> Result<RetrievalBench> {
    if samples.is_empty() || batch_size == 0 {
        return Err(D2kError::config("benchmark needs samples and a positive batch size"));
    }
    if batches < 20 {
        return Err(D2kError::config("benchmark needs at least 20 timed batches"));
    }
    let plan = QueryPlan::new(schema);
    let mut cursor = 0;
    let mut next_batch = || {
        let b: Vec<Sample> = (0..batch_size).map(|i| samples[(cursor + i) % samples.len()].clone()).collect();
        cursor = (cursor + batch_size) % samples.len();
        b
    };
    let warm = next_batch();
    let first = retrieve(&warm, kb, &plan);
    let mut hits = first.hit_rate();
    let mut times = Vec::with_capacity(batches);
    for _ in 0..batches {
        let batch = next_batch();
        let start = Instant::now();
        let r = retrieve(&batch, kb, &plan);
        times.push(start.elapsed().as_secs_f64() * 1e3);
        hits += std::hint::black_box(r).hit_rate();
    }
    times.sort_by(f64::total_cmp);
    let median_ms = if batches % 2 == 1 {
        times[batches / 2]
    } else {
        (times[batches / 2 - 1] + times[batches / 2]) / 2.0
    };
    let st = kb.stats();
    Ok(RetrievalBench {
        batch_size,
        batches,
        queries_per_sample: plan.len(),
        median_ms,
        min_ms: times[0],
        max_ms: times[batches - 1],
        median_us_per_sample: median_ms * 1e3 / batch_size as f64,
        kb_entries: st.entries,
        kb_bytes: st.bytes,
        hit_rate: hits / (batches + 1) as f64,
    })
}

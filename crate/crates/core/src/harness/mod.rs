//! Metrics, experiment protocols and timing reports.

mod bench;
mod experiment;
mod metrics;

pub use bench::{bench_retrieval, RetrievalBench};
pub use experiment::{run_experiment, CellRecord, ExperimentConfig, ExperimentReport, FeatureSet, Method, MethodSummary};
pub use metrics::{auc, auc_pairwise, logloss, MetricPair};

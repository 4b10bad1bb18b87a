//! Feature schemas, log ingestion, chronological partitioning and synthetic data.

mod partition;
mod sample;
mod schema;
mod synth;
mod tsv;

pub use partition::{partition, DatasetPartition, PartitionConfig};
pub use sample::{Sample, Vocabulary, OOV};
pub use schema::{FeatureSchema, FieldKind, FieldSpec, Side, DEFAULT_MAX_MULTI};
pub use synth::{gen_synthetic, GroundTruth, RawTriple, SynthConfig, SynthField, SyntheticData};
pub use tsv::{load_logs, load_logs_with_vocab, read_logs, save_logs, write_logs, VocabMode};

//! Ternary knowledge base: keys, generation from old data, lookup, update
//! policies and the binary file format.

mod base;
mod build;
mod file;
mod key;

pub use base::{KbMeta, KbStats, KnowledgeBase, UpdatePolicy};
pub use build::{distinct_keys, generate_kb, update_kb};
pub use file::{KB_MAGIC, KB_VERSION};
pub use key::{key_fields, TernaryKey};

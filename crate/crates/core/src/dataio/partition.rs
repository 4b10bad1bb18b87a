use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::sample::Sample;
use crate::error::{D2kError, Result};

/// Chronological split parameters. Block numbers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub window_seconds: i64,
    /// Last block of the old data.
    pub p1: usize,
    /// Last block of the training data.
    pub p2: usize,
    /// Number of blocks dropped between old and training data.
    pub gap: usize,
    /// Start of block 1; defaults to the earliest timestamp.
    pub origin: Option<i64>,
}

/// Sample indices grouped into time blocks `D_1..D_T` and the old / train /
/// test ranges over those blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPartition {
    pub config: PartitionConfig,
    /// `blocks[t]` holds the indices of samples in block `t + 1`.
    pub blocks: Vec<Vec<usize>>,
}

impl DatasetPartition {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn old_blocks(&self) -> RangeInclusive<usize> {
        1..=self.config.p1
    }

    pub fn gap_blocks(&self) -> RangeInclusive<usize> {
        self.config.p1 + 1..=self.config.p1 + self.config.gap
    }

    pub fn train_blocks(&self) -> RangeInclusive<usize> {
        self.config.p1 + self.config.gap + 1..=self.config.p2
    }

    pub fn test_blocks(&self) -> RangeInclusive<usize> {
        self.config.p2 + 1..=self.blocks.len()
    }

    /// Indices of the samples in 1-based blocks `range`, in block order.
    pub fn indices(&self, range: RangeInclusive<usize>) -> Vec<usize> {
        range.flat_map(|b| self.blocks[b - 1].iter().copied()).collect()
    }

    pub fn old(&self) -> Vec<usize> {
        self.indices(self.old_blocks())
    }

    pub fn gap_indices(&self) -> Vec<usize> {
        self.indices(self.gap_blocks())
    }

    pub fn train(&self) -> Vec<usize> {
        self.indices(self.train_blocks())
    }

    pub fn test(&self) -> Vec<usize> {
        self.indices(self.test_blocks())
    }
}

/// Splits samples into half-open windows `[origin + (t-1)·w, origin + t·w)`
/// and assigns blocks to old / gap / train / test.
pub fn partition(samples: &[Sample], config: PartitionConfig) -> Result<DatasetPartition> {
    let PartitionConfig {
        window_seconds,
        p1,
        p2,
        gap,
        origin,
    } = config;
    if window_seconds <= 0 {
        return Err(D2kError::config("window_seconds must be positive"));
    }
    if samples.is_empty() {
        return Err(D2kError::config("cannot partition an empty dataset"));
    }
    if p1 < 1 || p2 <= p1 {
        return Err(D2kError::config(format!("need 1 <= p1 < p2, got p1={p1}, p2={p2}")));
    }
    let origin = origin.unwrap_or_else(|| samples.iter().map(|s| s.timestamp).min().unwrap_or(0));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.timestamp < origin {
            return Err(D2kError::config(format!("sample {i} precedes the partition origin")));
        }
        let b = ((s.timestamp - origin) / window_seconds) as usize;
        if blocks.len() <= b {
            blocks.resize_with(b + 1, Vec::new);
        }
        blocks[b].push(i);
    }
    let t = blocks.len();
    if p2 >= t {
        return Err(D2kError::config(format!("p2={p2} leaves no test blocks among {t}")));
    }
    let part = DatasetPartition { config, blocks };
    if part.train_blocks().is_empty() {
        return Err(D2kError::config(format!("gap {gap} leaves no training blocks between p1={p1} and p2={p2}")));
    }
    for (name, idx) in [("old", part.old()), ("train", part.train()), ("test", part.test())] {
        if idx.is_empty() {
            return Err(D2kError::config(format!("{name} split is empty")));
        }
    }
    Ok(part)
}

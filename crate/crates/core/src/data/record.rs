use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::DataError;

/// One generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    #[serde(with = "serde_bytes")]
    pub payload: Vec<u8>,
    pub token_count: u32,
    pub channels: BTreeMap<String, f64>,
}

impl Rollout {
    pub fn channel(&self, name: &str) -> Option<f64> {
        self.channels.get(name).copied()
    }
}

/// A prompt and its rollout group. Never split across destinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub group: Vec<Rollout>,
    pub meta: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn new(sample_id: u64) -> Self {
        Self { sample_id, group: Vec::new(), meta: BTreeMap::new() }
    }

    pub fn tokens(&self) -> u64 {
        self.group.iter().map(|r| r.token_count as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub stage_id: String,
    pub iteration: u32,
    pub records: Vec<SampleRecord>,
}

impl SampleBatch {
    pub fn new(stage_id: impl Into<String>, iteration: u32, records: Vec<SampleRecord>) -> Self {
        Self { stage_id: stage_id.into(), iteration, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tokens(&self) -> u64 {
        self.records.iter().map(SampleRecord::tokens).sum()
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.sample_id).collect()
    }

    pub fn check_unique_ids(&self) -> Result<(), DataError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.sample_id) {
                return Err(DataError::DuplicateSample(r.sample_id));
            }
        }
        Ok(())
    }
}

pub fn encode_records(records: &[SampleRecord]) -> Vec<u8> {
    bincode::serialize(records).expect("records serialize")
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<SampleRecord>, DataError> {
    bincode::deserialize(bytes).map_err(|e| DataError::Codec(e.to_string()))
}

/// Serialized size of a record slice.
pub fn encoded_len(records: &[SampleRecord]) -> u64 {
    bincode::serialized_size(records).expect("records size")
}

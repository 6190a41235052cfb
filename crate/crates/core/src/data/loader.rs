//! Sharded dataset ingest: each DP group reads only its contiguous region.

use std::fs;
use std::ops::Range;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{SampleBatch, SampleRecord};
use super::DataError;
use crate::hash;
use crate::topology::ParallelLayout;

/// Stage id carried by batches that come straight from the loader.
pub const LOADER_STAGE: &str = "dataset";

/// Contiguous, equal-size region per DP group.
pub fn shard_dataset(dataset_size: u64, layout: ParallelLayout) -> Result<Vec<Range<u64>>, DataError> {
    let d = layout.dp as u64;
    if d == 0 || !dataset_size.is_multiple_of(d) {
        return Err(DataError::Indivisible { what: "dataset size", n: dataset_size, d });
    }
    let per = dataset_size / d;
    Ok((0..d).map(|g| g * per..(g + 1) * per).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// `size` prompts of `prompt_tokens` tokens derived from `seed`.
    Synthetic { size: u64, prompt_tokens: u32, bytes_per_token: u32, seed: u64 },
    /// One `{"id": u64, "prompt": string}` object per line.
    Jsonl { path: PathBuf },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRow {
    id: u64,
    prompt: String,
}

impl DataSource {
    pub fn len(&self) -> Result<u64, DataError> {
        match self {
            DataSource::Synthetic { size, .. } => Ok(*size),
            DataSource::Jsonl { path } => {
                let text = read(path)?;
                Ok(text.lines().count() as u64)
            }
        }
    }

    pub fn is_empty(&self) -> Result<bool, DataError> {
        Ok(self.len()? == 0)
    }

    /// Reads records at positions `range`.
    pub fn load(&self, range: Range<u64>) -> Result<Vec<SampleRecord>, DataError> {
        match self {
            DataSource::Synthetic { size, prompt_tokens, bytes_per_token, seed } => {
                if range.end > *size {
                    return Err(DataError::OutOfRange { end: range.end, len: *size });
                }
                let len = (*prompt_tokens as usize) * (*bytes_per_token as usize);
                Ok(range
                    .map(|i| {
                        let prompt: String = hash::byte_stream(*seed, &[0x5052_4f4d_5054, i], len)
                            .into_iter()
                            .map(|b| (b'a' + b % 26) as char)
                            .collect();
                        let mut r = SampleRecord::new(i);
                        r.meta.insert("prompt".into(), prompt);
                        r
                    })
                    .collect())
            }
            DataSource::Jsonl { path } => {
                let text = read(path)?;
                let total = text.lines().count() as u64;
                if range.end > total {
                    return Err(DataError::OutOfRange { end: range.end, len: total });
                }
                text.lines()
                    .enumerate()
                    .skip(range.start as usize)
                    .take((range.end - range.start) as usize)
                    .map(|(lineno, line)| {
                        let row: JsonlRow = serde_json::from_str(line)
                            .map_err(|e| DataError::Parse { line: lineno + 1, message: e.to_string() })?;
                        let mut r = SampleRecord::new(row.id);
                        r.meta.insert("prompt".into(), row.prompt);
                        Ok(r)
                    })
                    .collect()
            }
        }
    }
}

fn read(path: &PathBuf) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

/// Loads exactly the records of one shard.
pub fn load_shard(source: &DataSource, range: Range<u64>) -> Result<Vec<SampleRecord>, DataError> {
    source.load(range)
}

/// Per-DP-group reader over one shard.
#[derive(Debug, Clone)]
pub struct ShardLoader {
    layout: ParallelLayout,
    dp_rank: u32,
    records: Vec<SampleRecord>,
    shuffle_seed: Option<u64>,
}

impl ShardLoader {
    /// Reads the shard of `dp_rank` from `source`.
    pub fn open(source: &DataSource, layout: ParallelLayout, dp_rank: u32) -> Result<Self, DataError> {
        let ranges = shard_dataset(source.len()?, layout)?;
        let range = ranges[dp_rank as usize].clone();
        Ok(Self::from_records(layout, dp_rank, load_shard(source, range)?))
    }

    /// Wraps a shard that was obtained some other way (e.g. sent by a controller).
    pub fn from_records(layout: ParallelLayout, dp_rank: u32, records: Vec<SampleRecord>) -> Self {
        Self { layout, dp_rank, records, shuffle_seed: None }
    }

    pub fn with_shuffle(mut self, seed: Option<u64>) -> Self {
        self.shuffle_seed = seed;
        self
    }

    pub fn shard(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn dp_rank(&self) -> u32 {
        self.dp_rank
    }

    pub fn per_group(&self, global_batch: u64) -> Result<usize, DataError> {
        let d = self.layout.dp as u64;
        if !global_batch.is_multiple_of(d) {
            return Err(DataError::Indivisible { what: "global batch", n: global_batch, d });
        }
        Ok((global_batch / d) as usize)
    }

    /// The group's slice of global batch `iteration`. Reading wraps at the end
    /// of the shard; with shuffling enabled each pass uses its own permutation.
    pub fn next_batch(&self, iteration: u32, global_batch: u64) -> Result<SampleBatch, DataError> {
        let per = self.per_group(global_batch)?;
        let len = self.records.len();
        if per > len {
            return Err(DataError::ShardTooSmall { shard: len, batch: per });
        }
        let start = iteration as usize * per;
        let mut perm_epoch = usize::MAX;
        let mut perm: Vec<usize> = Vec::new();
        let records = (start..start + per)
            .map(|pos| {
                let (epoch, offset) = (pos / len, pos % len);
                let idx = match self.shuffle_seed {
                    None => offset,
                    Some(seed) => {
                        if epoch != perm_epoch {
                            perm = (0..len).collect();
                            let key = hash::keyed(seed, &[epoch as u64, self.dp_rank as u64]);
                            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
                            perm_epoch = epoch;
                        }
                        perm[offset]
                    }
                };
                self.records[idx].clone()
            })
            .collect();
        Ok(SampleBatch::new(LOADER_STAGE, iteration, records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn synthetic(size: u64) -> DataSource {
        DataSource::Synthetic { size, prompt_tokens: 4, bytes_per_token: 2, seed: 1 }
    }

    #[test]
    fn two_way_split_of_512() {
        let r = shard_dataset(512, ParallelLayout::new(2, 2)).unwrap();
        assert_eq!(r, vec![0..256, 256..512]);
    }

    #[test]
    fn singleton_shards() {
        let r = shard_dataset(8, ParallelLayout::new(8, 1)).unwrap();
        assert_eq!(r.len(), 8);
        assert!(r.iter().enumerate().all(|(i, s)| *s == (i as u64..i as u64 + 1)));
    }

    #[test]
    fn indivisible_dataset() {
        assert!(matches!(
            shard_dataset(10, ParallelLayout::new(4, 1)),
            Err(DataError::Indivisible { n: 10, d: 4, .. })
        ));
    }

    #[test]
    fn tp_peers_load_identical_shards() {
        let layout = ParallelLayout::new(2, 2);
        let src = synthetic(512);
        let rank0 = ShardLoader::open(&src, layout, layout.dp_rank(0)).unwrap();
        let rank1 = ShardLoader::open(&src, layout, layout.dp_rank(1)).unwrap();
        assert_eq!(rank0.shard().len(), 256);
        assert_eq!(rank0.shard().first().unwrap().sample_id, 0);
        assert_eq!(rank0.shard().last().unwrap().sample_id, 255);
        assert_eq!(rank0.shard(), rank1.shard());
        let rank2 = ShardLoader::open(&src, layout, layout.dp_rank(2)).unwrap();
        assert_eq!(rank2.shard()[0].sample_id, 256);
    }

    #[test]
    fn synthetic_group_two_of_four() {
        let l = ShardLoader::open(&synthetic(16), ParallelLayout::new(4, 1), 2).unwrap();
        let ids: Vec<u64> = l.shard().iter().map(|r| r.sample_id).collect();
        assert_eq!(ids, vec![8, 9, 10, 11]);
    }

    #[test]
    fn batches_split_global_batch() {
        let layout = ParallelLayout::new(2, 1);
        let src = synthetic(128);
        let a = ShardLoader::open(&src, layout, 0).unwrap().next_batch(0, 64).unwrap();
        let b = ShardLoader::open(&src, layout, 1).unwrap().next_batch(0, 64).unwrap();
        assert_eq!((a.len(), b.len()), (32, 32));
        let mut all: Vec<u64> = a.sample_ids().into_iter().chain(b.sample_ids()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 64);
    }

    #[test]
    fn one_record_per_group_and_idempotent() {
        let l = ShardLoader::open(&synthetic(8), ParallelLayout::new(4, 1), 1).unwrap();
        let x = l.next_batch(3, 4).unwrap();
        assert_eq!(x.len(), 1);
        assert_eq!(x, l.next_batch(3, 4).unwrap());
        assert!(matches!(l.next_batch(0, 6), Err(DataError::Indivisible { .. })));
    }

    #[test]
    fn wraps_at_epoch_boundary() {
        let l = ShardLoader::open(&synthetic(8), ParallelLayout::new(2, 1), 0).unwrap();
        // Shard is 0..4, three per batch.
        assert_eq!(l.next_batch(0, 6).unwrap().sample_ids(), vec![0, 1, 2]);
        assert_eq!(l.next_batch(1, 6).unwrap().sample_ids(), vec![3, 0, 1]);
        assert!(matches!(l.next_batch(0, 10), Err(DataError::ShardTooSmall { .. })));
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let l = ShardLoader::open(&synthetic(64), ParallelLayout::new(1, 1), 0).unwrap().with_shuffle(Some(5));
        let a = l.next_batch(0, 64).unwrap().sample_ids();
        assert_eq!(a, l.next_batch(0, 64).unwrap().sample_ids());
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        assert_ne!(a, sorted);
    }

    #[test]
    fn jsonl_source_and_parse_error_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..4 {
            writeln!(f, "{{\"id\": {}, \"prompt\": \"q{i}\"}}", 100 + i).unwrap();
        }
        let src = DataSource::Jsonl { path: f.path().to_path_buf() };
        let l = ShardLoader::open(&src, ParallelLayout::new(2, 1), 1).unwrap();
        assert_eq!(l.shard().iter().map(|r| r.sample_id).collect::<Vec<_>>(), vec![102, 103]);
        assert_eq!(l.shard()[0].meta["prompt"], "q2");

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "{{\"id\": 1, \"prompt\": \"ok\"}}").unwrap();
        writeln!(bad, "{{\"id\": \"two\"}}").unwrap();
        let src = DataSource::Jsonl { path: bad.path().to_path_buf() };
        assert!(matches!(src.load(0..2), Err(DataError::Parse { line: 2, .. })));
        let missing = DataSource::Jsonl { path: "/nonexistent/x.jsonl".into() };
        assert!(matches!(missing.len(), Err(DataError::Io(_))));
    }
}

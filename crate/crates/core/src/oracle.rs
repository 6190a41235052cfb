//! Single-process reference execution used to check the distributed and
//! central modes. It owns the whole dataset, computes each iteration's
//! global batch directly from the shard arithmetic and runs every chain node
//! once over that batch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{DataError, SampleBatch, SampleRecord};
use crate::hash;
use crate::runner::RunError;
use crate::worker::{digest_records, registry_bind, FnContext, RecordDigest, Registry, WorkerError};

/// Global batch of `iteration` without going through any loader: group `g`
/// of `d` owns records `[g*N/d, (g+1)*N/d)` and reads `G/d` positions
/// starting at `iteration*G/d`, wrapping around its shard.
pub fn global_batch(
    all: &[SampleRecord],
    d: u32,
    global_batch: u64,
    iteration: u32,
    shuffle: Option<u64>,
) -> Result<Vec<SampleRecord>, DataError> {
    let (n, d) = (all.len(), d as usize);
    if n % d != 0 {
        return Err(DataError::Indivisible { what: "dataset size", n: n as u64, d: d as u64 });
    }
    if !(global_batch as usize).is_multiple_of(d) {
        return Err(DataError::Indivisible { what: "global batch", n: global_batch, d: d as u64 });
    }
    let (shard, per) = (n / d, global_batch as usize / d);
    let mut out = Vec::with_capacity(global_batch as usize);
    for g in 0..d {
        for j in 0..per {
            let pos = iteration as usize * per + j;
            let offset = pos % shard;
            let local = match shuffle {
                None => offset,
                Some(seed) => {
                    let mut perm: Vec<usize> = (0..shard).collect();
                    let key = hash::keyed(seed, &[(pos / shard) as u64, g as u64]);
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
                    perm[offset]
                }
            };
            out.push(all[g * shard + local].clone());
        }
    }
    Ok(out)
}

/// Sorted digests of the final batch of every iteration, warmup included.
pub fn reference_digests(config: &RunConfig) -> Result<Vec<Vec<RecordDigest>>, RunError> {
    let plan = config.validate()?;
    let source = config.data_source();
    let data_err = |e: DataError| RunError::Rank { rank: 0, error: e.into() };
    let all = source.len().and_then(|n| source.load(0..n)).map_err(data_err)?;
    let chain = registry_bind(plan.chain_for(0), &Registry::builtin(), &plan.layouts).map_err(|error| RunError::Rank { rank: 0, error })?;
    let mut params = config.function_params();
    params.no_cost = true;
    let first_dp = chain.layouts()[0].dp;
    let mut versions = BTreeMap::new();
    let mut out = Vec::new();
    for it in 0..config.warmup + config.iterations {
        let records = global_batch(&all, first_dp, config.global_batch, it, config.shuffle_seed()).map_err(data_err)?;
        let mut batch = SampleBatch::new("dataset", it, records);
        for node in &chain.nodes {
            let mut ctx = FnContext { node: &node.spec, iteration: it, params: &params, model_versions: &mut versions };
            batch = (node.func)(&mut ctx, batch).map_err(|source| RunError::Rank {
                rank: 0,
                error: WorkerError::Function { node: node.spec.id.clone(), source },
            })?;
        }
        let mut d = digest_records(&batch.records);
        d.sort();
        out.push(d);
    }
    Ok(out)
}
